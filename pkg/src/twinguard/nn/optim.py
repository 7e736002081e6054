"""Adam with L2 weight decay and the two learning-rate schedules used in training."""

import math

import numpy as np


class Adam:
    """Adam over a dict of named arrays, updated in place.

    Weight decay is the classic L2 form: wd * param is added to the gradient.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads, names=None):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in (names if names is not None else grads):
            g = grads[k]
            p = self.params[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class ReduceLROnPlateau:
    """Multiply the learning rate by `factor` after `patience` epochs without improvement."""

    def __init__(self, opt, factor=0.5, patience=5, min_lr=1e-6, threshold=1e-4):
        self.opt = opt
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = math.inf
        self.bad = 0

    def step(self, metric):
        if metric < self.best * (1 - self.threshold):
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad > self.patience:
                self.opt.lr = max(self.opt.lr * self.factor, self.min_lr)
                self.bad = 0
        return self.opt.lr


class CosineAnnealingLR:
    """lr_e = eta_min + (lr0 - eta_min) * (1 + cos(pi * e / T_max)) / 2."""

    def __init__(self, opt, T_max, eta_min=0.0):
        self.opt = opt
        self.T_max = max(int(T_max), 1)
        self.eta_min = eta_min
        self.base_lr = opt.lr
        self.epoch = 0

    def step(self):
        self.epoch += 1
        e = min(self.epoch, self.T_max)
        self.opt.lr = self.eta_min + (self.base_lr - self.eta_min) * (1 + math.cos(math.pi * e / self.T_max)) / 2
        return self.opt.lr

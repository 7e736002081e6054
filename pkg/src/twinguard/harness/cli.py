"""Command-line entry point: simulate, attack-gen, train-dt, train-ade, evaluate, report."""

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np
import yaml

from ..attacks import generate_scenario
from ..plant.io import load_config
from ..plant.sim import export_csv, simulate
from ..plant.topology import default_noise, default_topology
from ..twin.model import TcnTwin
from .campaign import (Artifacts, CampaignConfig, calibrate_reference, evaluate, report_json, train_detector,
                       train_twin)

log = logging.getLogger("twinguard")


def _campaign_config(args):
    d = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            d = yaml.safe_load(f) or {}
    cfg = CampaignConfig.from_dict(d)
    names = {f.name for f in fields(CampaignConfig)}
    for kv in getattr(args, "set", None) or []:
        key, _, val = kv.partition("=")
        target = cfg
        if key.startswith("episode."):
            target, key = cfg.episode, key.split(".", 1)[1]
        elif key not in names:
            raise SystemExit(f"unknown config key {key}")
        if not hasattr(target, key):
            raise SystemExit(f"unknown config key {key}")
        setattr(target, key, type(getattr(target, key))(yaml.safe_load(val)))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _plant(args):
    if getattr(args, "plant", None):
        topo, noise = load_config(args.plant)
        return topo, noise if noise is not None else default_noise(topo, seed=args.seed or 0)
    topo = default_topology()
    return topo, default_noise(topo, seed=args.seed or 0)


def cmd_simulate(args):
    topo, noise = _plant(args)
    rng = np.random.default_rng(args.seed)
    Y, U, _ = simulate(topo, noise, args.steps, seed=args.seed, rng_dither=rng, dither=args.dither)
    export_csv(args.out, topo, np.arange(args.steps, dtype=float), Y, U)
    print(f"wrote {args.steps} rows to {args.out}")
    return 0


def cmd_attack_gen(args):
    topo, noise = _plant(args)
    out = [generate_scenario(args.kind, topo, args.seed + i, noise).to_dict() for i in range(args.n)]
    text = json.dumps(out, indent=1)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        print(text)
    return 0


def cmd_train_dt(args):
    cfg = _campaign_config(args)
    topo, _ = _plant(args)
    os.makedirs(args.out, exist_ok=True)
    twin = train_twin(cfg, topo, verbose=args.verbose)
    twin.save(os.path.join(args.out, "twin.bin"))
    print(f"twin saved; e_bar={twin.e_bar:.4g} L_f={twin.L_f:.4g}")
    return 0


def cmd_train_ade(args):
    cfg = _campaign_config(args)
    topo, noise = _plant(args)
    twin = TcnTwin.load(os.path.join(args.models, "twin.bin"))
    ade, stats = train_detector(cfg, twin, topo, noise, verbose=args.verbose)
    ref, tau = calibrate_reference(cfg, ade, twin, topo, noise)
    Artifacts(twin, ade, stats, ref, tau).save(args.models)
    print(f"detector saved; tau_mmd={tau:.4g}")
    return 0


def cmd_evaluate(args):
    cfg = _campaign_config(args)
    topo, noise = _plant(args)
    art = Artifacts.load(args.models)

    def progress(i, out):
        r = out.get("resilient")
        log.info("episode %d detect=%s recover=%s", i, out["observe"].t_detect,
                 None if r is None else r.t_recover)

    report, _ = evaluate(cfg, art, topo, noise, progress=progress if args.verbose else None)
    text = report_json(report)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    print(format_report(report.to_dict()))
    bad = report.check()
    if bad:
        for b in bad:
            print(f"invariant violated: {b}", file=sys.stderr)
        return 2
    return 0


def format_report(d):
    det, res = d["detection"], d["resilience"]
    lines = ["class   precision  recall   f1"]
    for name, s in det["per_class"].items():
        lines.append(f"{name:<7} {s['precision']:9.3f} {s['recall']:7.3f} {s['f1']:6.3f}")
    fmt = lambda v: "n/a" if v is None else (f"{v:.4g}" if isinstance(v, float) else str(v))
    rows = [("macro attack F1", det["macro_attack_f1"]), ("eps_disc", det["eps_disc"]), ("FAR", det["far"]),
            ("FAR worst hour", det["far_worst_hour"]), ("MTTD mean [s]", det["mttd_mean"]),
            ("MTTD worst [s]", det["mttd_worst"]), ("miss rate", det["miss_rate"]),
            ("D_rel resilient", res.get("d_rel_resilient")), ("D_rel shutdown", res.get("d_rel_shutdown")),
            ("recovery resilient [s]", res.get("recovery_resilient_mean")),
            ("recovery shutdown [s]", res.get("recovery_shutdown_mean")),
            ("critical violations", res.get("critical_violations")),
            ("critical rate upper bound", res.get("critical_upper_bound"))]
    lines += [f"{k:<26} {fmt(v)}" for k, v in rows]
    if d.get("flags"):
        lines += ["flags:"] + [f"  {f}" for f in d["flags"]]
    return "\n".join(lines)


def cmd_report(args):
    with open(args.input) as f:
        d = json.load(f)
    print(format_report(d))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(d, f, sort_keys=True, indent=1)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="twinguard", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, seed_required=False):
        sp.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
        sp.add_argument("--plant", help="plant topology file (yaml or json)")
        sp.add_argument("--config", help="campaign configuration (yaml or json)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a campaign config key")

    s = sub.add_parser("simulate", help="run the plant under nominal control and export CSV")
    common(s)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--dither", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("attack-gen", help="sample labelled attack scenarios")
    common(s)
    s.add_argument("--kind", choices=["A_S", "A_M"], required=True)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_attack_gen)

    s = sub.add_parser("train-dt", help="train the twin on normal operation")
    common(s)
    s.add_argument("--out", required=True, help="model directory")
    s.set_defaults(func=cmd_train_dt)

    s = sub.add_parser("train-ade", help="train and calibrate the discrimination engine")
    common(s)
    s.add_argument("--models", required=True, help="model directory holding twin.bin")
    s.set_defaults(func=cmd_train_ade)

    s = sub.add_parser("evaluate", help="run the seeded attack campaign")
    common(s, seed_required=True)
    s.add_argument("--models", required=True)
    s.add_argument("--out", help="write the metrics report as JSON")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="render a metrics report")
    s.add_argument("input")
    s.add_argument("--out", help="write the normalized machine-readable report")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

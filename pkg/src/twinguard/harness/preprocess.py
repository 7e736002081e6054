"""Ingestion of raw sensor CSVs: 1 Hz resampling, gap filling, outlier clipping, z-scoring."""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

FFILL_MAX_GAP = 5.0       # s; shorter gaps are forward-filled, longer ones interpolated
CLIP_WINDOW = 300         # s
CLIP_SIGMAS = 5.0


@dataclass
class Schema:
    time: str
    sensors: list
    label: str | None = None

    @classmethod
    def from_dict(cls, d):
        return cls(d["time"], list(d["sensors"]), d.get("label"))


@dataclass
class NormStats:
    mean: dict
    std: dict
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["mean"]), dict(d["std"]), dict(d.get("provenance", {})))


def _read(raw, schema):
    df = pd.read_csv(raw) if isinstance(raw, str) else raw.copy()
    known = {schema.time, *schema.sensors} | ({schema.label} if schema.label else set())
    unknown = [c for c in df.columns if c not in known]
    if unknown:
        raise ValueError(f"unknown columns {unknown}")
    missing = [c for c in known if c not in df.columns]
    if missing:
        raise ValueError(f"declared columns missing from the input: {missing}")
    t = df[schema.time]
    if not np.issubdtype(t.dtype, np.number):
        t = pd.to_datetime(t).astype("int64") / 1e9
    t = np.asarray(t, dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise ValueError("timestamps are not monotone")
    df = df.drop(columns=[schema.time])
    df.insert(0, "time", t)
    return df


def resample_1hz(df, sensors, label=None):
    """Average within 1 s bins anchored at the first timestamp; empty bins become NaN."""
    t0 = df["time"].iloc[0]
    b = np.floor(df["time"].to_numpy() - t0 + 1e-9).astype(np.int64)
    groups = df.assign(_bin=b).groupby("_bin")
    out = groups[sensors].mean()
    if label:
        out[label] = groups[label].max()
    full = np.arange(b[-1] + 1)
    out = out.reindex(full)
    out.insert(0, "time", t0 + full.astype(np.float64))
    return out.reset_index(drop=True)


def fill_gaps(col, max_ffill=FFILL_MAX_GAP):
    """Forward-fill runs whose surrounding valid samples are < max_ffill s apart,
    interpolate linearly across longer ones. Leading NaNs take the first valid value."""
    v = col.to_numpy(dtype=np.float64).copy()
    valid = np.flatnonzero(~np.isnan(v))
    if len(valid) == 0:
        raise ValueError(f"column {col.name} has no valid samples")
    v[:valid[0]] = v[valid[0]]
    for a, b in zip(valid[:-1], valid[1:]):
        if b - a <= 1:
            continue
        if b - a < max_ffill:
            v[a + 1:b] = v[a]
        else:
            v[a + 1:b] = v[a] + (v[b] - v[a]) * (np.arange(1, b - a) / (b - a))
    v[valid[-1] + 1:] = v[valid[-1]]
    return pd.Series(v, index=col.index, name=col.name)


def clip_outliers(col, window=CLIP_WINDOW, k=CLIP_SIGMAS):
    """Clip to the trailing rolling mean +- k rolling std (window in samples at 1 Hz)."""
    roll = col.rolling(window, min_periods=min(window, 30))
    mu, sd = roll.mean(), roll.std()
    lo, hi = mu - k * sd, mu + k * sd
    return col.clip(lower=lo, upper=hi)  # NaN bounds (short history) leave values untouched


def preprocess_ingest(raw, schema, stats=None, train_fraction=1.0, source=None):
    """Return (normalized frame, stats).

    With `stats` None the z-score statistics come from the first `train_fraction` of the
    resampled rows only, and their provenance is recorded. Passing stats reuses them as-is.
    """
    schema = Schema.from_dict(schema) if isinstance(schema, dict) else schema
    df = _read(raw, schema)
    df = resample_1hz(df, schema.sensors, schema.label)
    for c in schema.sensors:
        df[c] = clip_outliers(fill_gaps(df[c]))
    if schema.label:
        df[schema.label] = fill_gaps(df[schema.label].astype(float), max_ffill=np.inf).round().astype(int)
    if stats is None:
        if not 0 < train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")
        n_train = max(2, int(round(train_fraction * len(df))))
        tr = df.iloc[:n_train]
        stats = NormStats({c: float(tr[c].mean()) for c in schema.sensors},
                          {c: float(max(tr[c].std(ddof=0), 1e-12)) for c in schema.sensors},
                          {"source": source if source is not None else (raw if isinstance(raw, str) else "frame"),
                           "rows": [0, n_train], "n_total": len(df)})
    else:
        stats = NormStats.from_dict(stats) if isinstance(stats, dict) else stats
        missing = [c for c in schema.sensors if c not in stats.mean]
        if missing:
            raise ValueError(f"stats lack channels {missing}")
    for c in schema.sensors:
        df[c] = (df[c] - stats.mean[c]) / stats.std[c]
    return df, stats

"""CSV ingestion and result export.

Ingestion sorts rows by cluster, expands categorical covariates to 0/1
dummies (first level of the lexicographic order is the reference), applies
optional square transforms and auto-detects cluster-constant columns.
Exports serialize every float with 12 significant digits so re-runs are
byte-identical.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from .crossval import CvCurve
from .engine import BoostTrace
from .errors import DataError
from .model import Dataset, _readonly, make_dataset


def _fmt(x):
    return f"{float(x):.12g}"


def ingest_csv(path, *, response, cluster, fixed, square=(), random_slopes=(),
               cluster_constant=None):
    """Read a long-format CSV into a :class:`Dataset`.

    ``square`` names numeric columns whose squares are appended as extra
    covariates (suffix ``^2``); ``random_slopes`` names design columns (after
    dummy expansion) entering the random-effect design behind the intercept.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    df = pd.read_csv(path)
    if df.empty:
        raise DataError(f"{path} contains no rows")

    fixed = list(fixed)
    square = list(square)
    missing = [c for c in [response, cluster, *fixed, *square] if c not in df.columns]
    if missing:
        raise DataError(f"missing column(s) in {path.name}: {', '.join(missing)}")
    if not pd.api.types.is_numeric_dtype(df[response]):
        raise DataError(f"response column {response!r} is not numeric")

    used = [response, cluster] + list(dict.fromkeys(fixed + square))
    n_before = len(df)
    df = df.dropna(subset=used)
    dropped = n_before - len(df)
    if dropped:
        warnings.warn(f"dropped {dropped} row(s) with missing values", RuntimeWarning,
                      stacklevel=2)
    if df.empty:
        raise DataError("no complete rows left after dropping missing values")

    cols = []
    names = []
    for c in fixed:
        if pd.api.types.is_numeric_dtype(df[c]):
            cols.append(df[c].to_numpy(dtype=float))
            names.append(c)
        else:
            levels = sorted(df[c].astype(str).unique())
            for level in levels[1:]:  # first level is the reference
                cols.append((df[c].astype(str) == level).to_numpy(dtype=float))
                names.append(f"{c}_{level}")
    for c in square:
        if not pd.api.types.is_numeric_dtype(df[c]):
            raise DataError(f"cannot square non-numeric column {c!r}")
        cols.append(df[c].to_numpy(dtype=float) ** 2)
        names.append(f"{c}^2")
    if not cols:
        raise DataError("no fixed-effect columns specified")

    X = np.column_stack(cols)
    bad = [c for c in random_slopes if c not in names]
    if bad:
        raise DataError(f"random-slope column(s) not in the design: {', '.join(bad)}")

    return make_dataset(
        df[response].to_numpy(dtype=float),
        df[cluster].to_numpy(),
        X, names,
        slope_cols=tuple(random_slopes),
        cluster_constant=cluster_constant,
    )


def standardize_dataset(data: Dataset):
    """Center and scale the fixed-effect columns to unit sample variance.

    The random-effect design keeps the original columns, so random effects
    and Q stay in data units.  Returns ``(dataset, means, sds)``.
    """
    means = data.X.mean(axis=0)
    sds = data.X.std(axis=0, ddof=1) if data.n_obs > 1 else np.ones(data.n_fixed)
    degenerate = sds < 1e-12
    if degenerate.any():
        warnings.warn(
            f"not scaling constant column(s): {[data.colnames[k] for k in np.flatnonzero(degenerate)]}",
            RuntimeWarning, stacklevel=2,
        )
        sds = np.where(degenerate, 1.0, sds)
    Xs = (data.X - means) / sds
    std = Dataset(
        y=data.y, cluster_id=data.cluster_id, X=_readonly(Xs), colnames=data.colnames,
        Z=data.Z, z_cols=data.z_cols, cluster_constant_idx=data.cluster_constant_idx,
        cluster_labels=data.cluster_labels, cluster_starts=data.cluster_starts,
        cluster_sizes=data.cluster_sizes, cluster_index=data.cluster_index,
    )
    return std, means, sds


def destandardize_trace(trace: BoostTrace, means, sds):
    """Map a coefficient path fitted on standardized covariates back to the
    original scale."""
    import dataclasses

    path = trace.beta_path.copy()
    path[:, 0] = trace.beta_path[:, 0] - trace.beta_path[:, 1:] @ (means / sds)
    path[:, 1:] = trace.beta_path[:, 1:] / sds
    return dataclasses.replace(trace, beta_path=path)


def export_results(trace: BoostTrace, curve: CvCurve | None, out_dir):
    """Write estimates.json, path.csv, cv.csv and ranef.csv into ``out_dir``.

    Without a CV curve the final iteration of the trace is reported and
    cv.csv is omitted.  Returns the written paths.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc

    m_star = curve.m_star if curve is not None else trace.m_stop
    written = []

    Q = trace.Q_path[m_star]
    est = {
        "m_star": int(m_star),
        "intercept": _round12(trace.beta_path[m_star, 0]),
        "coefficients": {
            name: _round12(v)
            for name, v in zip(trace.colnames, trace.beta_path[m_star, 1:])
        },
        "sigma2": _round12(trace.sigma2_path[m_star]),
        "tau2": _round12(Q[0, 0]),
        "Q": [[_round12(v) for v in row] for row in Q],
        "cv_minimum": _round12(curve.values[m_star - 1]) if curve is not None and m_star >= 1 else None,
    }
    p_est = out / "estimates.json"
    p_est.write_text(json.dumps(est, indent=2) + "\n")
    written.append(p_est)

    p_path = out / "path.csv"
    with p_path.open("w") as fh:
        fh.write(",".join(["iteration", "intercept", *trace.colnames]) + "\n")
        for m in range(trace.m_stop + 1):
            fh.write(",".join([str(m), *(_fmt(v) for v in trace.beta_path[m])]) + "\n")
    written.append(p_path)

    if curve is not None:
        p_cv = out / "cv.csv"
        with p_cv.open("w") as fh:
            fh.write("iteration,cv\n")
            for m, v in enumerate(curve.values, start=1):
                fh.write(f"{m},{_fmt(v)}\n")
        written.append(p_cv)

    ranef_names = ["intercept", *trace.z_cols[1:]]
    p_ranef = out / "ranef.csv"
    with p_ranef.open("w") as fh:
        fh.write(",".join(["cluster", *ranef_names]) + "\n")
        for label, row in zip(trace.cluster_labels, trace.gamma_path[m_star]):
            fh.write(",".join([str(label), *(_fmt(v) for v in row)]) + "\n")
    written.append(p_ranef)

    return written


def _round12(x):
    return float(f"{float(x):.12g}")

"""Qualification metrics comparing real and generated tables.

Scores: minimum per-feature KS complement, PCA eigenvector cosine score,
Kendall similarity of correlation matrices, critic-based proximity score and
polarization closeness error; plus plot-ready CSV exports (correlation
matrices, critic-score histograms, triangle grids, polarization bins).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .data import INPUT_COLUMNS, Dataset

PROXIMITY_NOTE = ("proximity score is the literal min-max position of the generated row's "
                  "critic score among its neighbours' scores; values outside [0, 1] mean the "
                  "row scores beyond its neighbourhood, and 'closer to 0 is better' is not "
                  "implied by this definition")
KENDALL_P_NOTE = "p-value from the normal approximation to tau under independence (no tie term)"


class MetricError(ValueError):
    pass


class EmptyDatasetError(MetricError):
    pass


class DegenerateCovarianceError(MetricError):
    pass


class ConstantFeatureError(MetricError):
    pass


class NoCommonBinError(MetricError):
    pass


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, Dataset):
        return x.continuous
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


# ---------------------------------------------------------------- KS


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample KS D: sup |F_a - F_b| evaluated at every observed value."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise EmptyDatasetError("KS statistic needs non-empty samples")
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_score(real, gen, names: Sequence[str] | None = None) -> tuple[float, dict[str, float]]:
    r, g = _as_matrix(real), _as_matrix(gen)
    if r.shape[0] == 0 or g.shape[0] == 0:
        raise EmptyDatasetError("ks_score needs at least one row in each dataset")
    if r.shape[1] != g.shape[1]:
        raise MetricError(f"feature count mismatch: {r.shape[1]} vs {g.shape[1]}")
    if names is None:
        names = real.schema.continuous_names if isinstance(real, Dataset) else \
            [f"x{i}" for i in range(r.shape[1])]
    ds = {name: ks_statistic(r[:, j], g[:, j]) for j, name in enumerate(names)}
    return float(min(1.0 - d for d in ds.values())), ds


# ---------------------------------------------------------------- PCA / dimension reduction


def cosine_score(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine similarity mapped from [-1, 1] to [0, 1]."""
    c = float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))
    return 0.5 * (min(1.0, max(-1.0, c)) + 1.0)


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude component is non-negative."""
    v = np.array(vectors, dtype=np.float64)
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[idx, np.arange(v.shape[1])] < 0, -1.0, 1.0)
    return v * signs


def pca(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and sign-fixed eigenvectors (columns) of the covariance."""
    x = _as_matrix(x)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    return vals, fix_signs(vecs[:, order])


@dataclass
class DimRedResult:
    score: float
    n_components: int
    weights: list[float]
    cosines: list[float]


def dim_red_score(real, gen, variance: float = 0.99) -> DimRedResult:
    """Explained-variance weighted cosine agreement of scaled principal axes.

    ``real`` and ``gen`` are expected in a common standardized space (the
    report standardizes both with the real data's statistics).
    """
    r, g = _as_matrix(real), _as_matrix(gen)
    d = r.shape[1]
    if g.shape[1] != d:
        raise MetricError(f"feature count mismatch: {d} vs {g.shape[1]}")
    if r.shape[0] < d + 1 or g.shape[0] < d + 1:
        raise DegenerateCovarianceError(f"need at least {d + 1} rows per dataset for PCA")
    lr, vr = pca(r)
    lg, vg = pca(g)
    total = lr.sum()
    if not total > 0 or not lg.sum() > 0:
        raise DegenerateCovarianceError("zero total variance")
    ratio = lr / total
    n = int(np.searchsorted(np.cumsum(ratio), variance - 1e-12) + 1)
    n = min(n, d)
    tiny = 1e-12 * max(lr[0], lg[0])
    if np.any(lg[:n] <= tiny) or np.any(lr[:n] <= tiny):
        raise DegenerateCovarianceError(
            f"covariance rank below the {n} components needed for {variance:.0%} of the variance")
    m_real = vr[:, :n] * np.sqrt(lr[:n])
    m_gen = vg[:, :n] * np.sqrt(lg[:n])
    cos = [cosine_score(m_real[:, i], m_gen[:, i]) for i in range(n)]
    w = ratio[:n]
    return DimRedResult(float(np.dot(w, cos) / w.sum()), n, w.tolist(), cos)


# ---------------------------------------------------------------- correlation / Kendall


def correlation_matrix(x, names: Sequence[str] | None = None) -> np.ndarray:
    m = _as_matrix(x)
    sd = m.std(axis=0)
    if np.any(sd == 0):
        bad = [names[i] if names else i for i in np.flatnonzero(sd == 0)]
        raise ConstantFeatureError(f"constant feature(s) have undefined correlation: {bad}")
    c = np.corrcoef(m, rowvar=False)
    c = 0.5 * (c + c.T)
    np.fill_diagonal(c, 1.0)
    return c


def _pair_counts(x: np.ndarray, y: np.ndarray, chunk: int = 512) -> tuple[int, int, int, int]:
    """(concordant - discordant, pairs, ties in x, ties in y) over all i < j."""
    m = x.size
    s = tx = ty = 0
    for start in range(0, m, chunk):
        stop = min(m, start + chunk)
        dx = np.sign(x[start:stop, None] - x[None, :])
        dy = np.sign(y[start:stop, None] - y[None, :])
        upper = np.arange(start, stop)[:, None] < np.arange(m)[None, :]
        s += int(np.sum((dx * dy)[upper]))
        tx += int(np.count_nonzero((dx == 0) & upper))
        ty += int(np.count_nonzero((dy == 0) & upper))
    return s, m * (m - 1) // 2, tx, ty


def kendall_tau_b(x, y) -> tuple[float, float]:
    """Kendall tau-b with tie correction and a normal-approximation p-value."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise MetricError("kendall_tau_b needs two equal-length vectors of length >= 2")
    s, n0, n1, n2 = _pair_counts(x, y)
    denom = (n0 - n1) * (n0 - n2)
    if denom == 0:
        raise ConstantFeatureError("tau-b undefined: one vector is entirely tied")
    tau = s / math.sqrt(denom)
    m = x.size
    z = 3.0 * tau * math.sqrt(m * (m - 1)) / math.sqrt(2.0 * (2 * m + 5))
    return tau, math.erfc(abs(z) / math.sqrt(2.0))


@dataclass
class KendallResult:
    score: float
    tau: float
    p_value: float


def kendall_score_from_matrices(c_real: np.ndarray, c_gen: np.ndarray) -> KendallResult:
    iu = np.triu_indices(c_real.shape[0], k=1)
    tau, p = kendall_tau_b(c_real[iu], c_gen[iu])
    return KendallResult((tau + 1.0) / 2.0, tau, p)


def kendall_score(real, gen) -> KendallResult:
    r, g = _as_matrix(real), _as_matrix(gen)
    if r.shape[1] < 2:
        raise MetricError("kendall_score needs at least 2 continuous features")
    names = real.schema.continuous_names if isinstance(real, Dataset) else None
    return kendall_score_from_matrices(correlation_matrix(r, names), correlation_matrix(g, names))


# ---------------------------------------------------------------- proximity


def proximity_from_scores(gen_score: float, neighbor_scores) -> float:
    """Min-max position of ``gen_score`` within the neighbours' scores (nan if degenerate)."""
    nb = np.asarray(neighbor_scores, dtype=np.float64)
    lo, hi = nb.min(), nb.max()
    if hi == lo:
        return math.nan
    return float((gen_score - lo) / (hi - lo))


@dataclass
class ProximitySummary:
    mean: float
    std: float
    crop: tuple[float, float]
    kept_fraction: float
    n_scored: int
    n_flagged: int
    note: str = PROXIMITY_NOTE


def summarize_proximity(scores: np.ndarray, crop: tuple[float, float] = (-5.0, 5.0)) -> ProximitySummary:
    scores = np.asarray(scores, dtype=np.float64)
    ok = scores[np.isfinite(scores)]
    kept = ok[(ok > crop[0]) & (ok < crop[1])]
    return ProximitySummary(
        float(kept.mean()) if kept.size else math.nan,
        float(kept.std()) if kept.size else math.nan,
        crop,
        float(kept.size / ok.size) if ok.size else math.nan,
        int(scores.size),
        int(scores.size - ok.size),
    )


def proximity_scores(crit, gen_rows: np.ndarray, real_rows: np.ndarray, input_idx: Sequence[int],
                     k: int = 20, n_eval: int | None = 10_000, seed: int = 0,
                     crop: tuple[float, float] = (-5.0, 5.0)):
    """Per generated row, proximity of its critic score to its k nearest real rows.

    Neighbours are found by L2 distance over ``input_idx`` columns of the
    encoded (standardized) rows. ``crit`` is a critic network or a callable
    mapping rows to scores. Returns ``(scores, summary)``; degenerate
    neighbourhoods give nan and are excluded from the summary.
    """
    from .networks import critic_score

    gen_rows = np.asarray(gen_rows, dtype=np.float64)
    real_rows = np.asarray(real_rows, dtype=np.float64)
    if k > real_rows.shape[0]:
        raise MetricError(f"k={k} exceeds the {real_rows.shape[0]} real rows")
    if n_eval is not None and n_eval < gen_rows.shape[0]:
        pick = np.sort(np.random.default_rng(seed).choice(gen_rows.shape[0], n_eval, replace=False))
        gen_rows = gen_rows[pick]
    score = crit if callable(crit) and not hasattr(crit, "input_width") else \
        (lambda rows: critic_score(crit, rows))
    s_real = np.asarray(score(real_rows))
    s_gen = np.asarray(score(gen_rows))
    idx = list(input_idx)
    tree = cKDTree(real_rows[:, idx])
    _, nn = tree.query(gen_rows[:, idx], k=k)
    nn = nn.reshape(len(gen_rows), k)
    nb = s_real[nn]
    lo, hi = nb.min(axis=1), nb.max(axis=1)
    span = hi - lo
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(span > 0, (s_gen - lo) / np.where(span > 0, span, 1.0), np.nan)
    return out, summarize_proximity(out, crop)


# ---------------------------------------------------------------- polarization


@dataclass
class PolarizationResult:
    e_v: float
    e_i: float
    n_bins: int
    n_common: int
    n_excluded: int
    table: list[dict] = field(default_factory=list)


def _bin_means(current: np.ndarray, voltage: np.ndarray, nc: int):
    idx = np.floor(current).astype(np.int64)
    idx = np.where(current == nc, nc - 1, idx)
    ok = (idx >= 0) & (idx < nc)
    idx = idx[ok]
    cnt = np.bincount(idx, minlength=nc)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.bincount(idx, weights=voltage[ok], minlength=nc) / cnt
        i = np.bincount(idx, weights=current[ok], minlength=nc) / cnt
    return cnt, v, i


def polarization_error(real_current, real_voltage, gen_current, gen_voltage) -> PolarizationResult:
    """Mean relative per-bin error (percent) of voltage and current on 1 A bins.

    ``nc = max(ceil(I_real))`` bins cover [j-1, j) amperes; bins empty in
    either dataset are left out of the average and counted as excluded.
    """
    rc = np.asarray(real_current, dtype=np.float64)
    rv = np.asarray(real_voltage, dtype=np.float64)
    gc = np.asarray(gen_current, dtype=np.float64)
    gv = np.asarray(gen_voltage, dtype=np.float64)
    if rc.size == 0 or gc.size == 0:
        raise NoCommonBinError("polarization error needs rows in both datasets")
    nc = int(np.max(np.ceil(rc)))
    if nc < 1:
        raise NoCommonBinError("real currents do not populate any positive bin")
    n_r, v_r, i_r = _bin_means(rc, rv, nc)
    n_g, v_g, i_g = _bin_means(gc, gv, nc)
    common = (n_r > 0) & (n_g > 0)
    if not common.any():
        raise NoCommonBinError("no current bin is populated in both datasets")
    err_v = np.abs((v_r - v_g) / v_r)
    err_i = np.abs((i_r - i_g) / i_r)
    table = []
    for j in range(nc):
        table.append({
            "bin": j + 1, "lo": float(j), "hi": float(j + 1),
            "n_real": int(n_r[j]), "n_gen": int(n_g[j]),
            "V_real": float(v_r[j]) if n_r[j] else None, "V_gen": float(v_g[j]) if n_g[j] else None,
            "I_real": float(i_r[j]) if n_r[j] else None, "I_gen": float(i_g[j]) if n_g[j] else None,
            "err_V_pct": float(100 * err_v[j]) if common[j] else None,
            "err_I_pct": float(100 * err_i[j]) if common[j] else None,
        })
    return PolarizationResult(float(100 * err_v[common].mean()), float(100 * err_i[common].mean()),
                              nc, int(common.sum()), int(nc - common.sum()), table)


def polarization_error_ds(real: Dataset, gen: Dataset, step: str | None = "polarization",
                          current: str = "I_load", voltage: str = "V_stack") -> PolarizationResult:
    """Dataset front-end: keeps only rows of the given step when a ``step`` column exists."""
    def pick(ds):
        if step is not None and "step" in ds.schema.names:
            ds = ds.take(np.flatnonzero(ds.labels("step") == step))
        return ds.column(current), ds.column(voltage)

    return polarization_error(*pick(real), *pick(gen))


# ---------------------------------------------------------------- triangle plot data


def hdr_thresholds(mass: np.ndarray, levels: Sequence[float] = (0.68, 0.95)) -> list[tuple[float, float]]:
    """For each level, the cell-mass threshold whose super-level set holds closest to that mass.

    Cells tied at a threshold enter or leave together, so candidate sets are
    the super-level sets of the distinct cell masses. Returns
    ``(threshold, enclosed_mass)`` pairs.
    """
    flat = np.asarray(mass, dtype=np.float64).ravel()
    total = flat.sum()
    if not total > 0:
        return [(0.0, 0.0) for _ in levels]
    vals, counts = np.unique(flat[flat > 0], return_counts=True)
    vals, counts = vals[::-1], counts[::-1]
    enclosed = np.cumsum(vals * counts) / total
    out = []
    for lv in levels:
        j = int(np.argmin(np.abs(enclosed - lv)))
        out.append((float(vals[j]), float(enclosed[j])))
    return out


def triangle_data(real: np.ndarray, gen: np.ndarray, names: Sequence[str], bins: int = 30,
                  levels: Sequence[float] = (0.68, 0.95)) -> dict[str, list[dict]]:
    r, g = _as_matrix(real), _as_matrix(gen)
    if len(names) < 2:
        raise MetricError("triangle export needs at least 2 features")
    edges = []
    for j in range(len(names)):
        lo = min(r[:, j].min(), g[:, j].min())
        hi = max(r[:, j].max(), g[:, j].max())
        if hi == lo:
            hi = lo + 1.0
        edges.append(np.linspace(lo, hi, bins + 1))
    one_d, two_d, lv_rows = [], [], []
    for j, name in enumerate(names):
        for label, m in (("real", r), ("gen", g)):
            h, _ = np.histogram(m[:, j], bins=edges[j])
            h = h / h.sum()
            for b in range(bins):
                one_d.append({"feature": name, "dataset": label, "bin_lo": edges[j][b],
                              "bin_hi": edges[j][b + 1], "mass": h[b]})
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            for label, m in (("real", r), ("gen", g)):
                h, _, _ = np.histogram2d(m[:, a], m[:, b], bins=[edges[a], edges[b]])
                h = h / h.sum()
                for ix in range(bins):
                    for iy in range(bins):
                        if h[ix, iy] > 0:
                            two_d.append({"feature_x": names[a], "feature_y": names[b],
                                          "dataset": label, "ix": ix, "iy": iy,
                                          "x_lo": edges[a][ix], "x_hi": edges[a][ix + 1],
                                          "y_lo": edges[b][iy], "y_hi": edges[b][iy + 1],
                                          "mass": h[ix, iy]})
                for lv, (t, enc) in zip(levels, hdr_thresholds(h, levels)):
                    lv_rows.append({"feature_x": names[a], "feature_y": names[b], "dataset": label,
                                    "level": lv, "threshold": t, "enclosed_mass": enc})
    return {"triangle_1d": one_d, "triangle_2d": two_d, "triangle_levels": lv_rows}


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def triangle_export(real, gen, names: Sequence[str], bins: int, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for key, rows in triangle_data(real, gen, names, bins).items():
        p = out_dir / f"{key}.csv"
        _write_rows(p, rows)
        paths.append(p)
    return paths


def write_matrix_csv(path, matrix: np.ndarray, names: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(names))
        for name, row in zip(names, matrix):
            w.writerow([name] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    s_ks: float
    s_dim: float
    s_kendall: float
    kendall_tau: float
    kendall_p_value: float
    e_v: float | None
    e_i: float | None
    ks_d: dict[str, float]
    dim_red: dict
    polarization: dict | None
    proximity: dict | None
    corr_real: list[list[float]]
    corr_gen: list[list[float]]
    features: list[str]
    n_real: int
    n_gen: int
    notes: list[str] = field(default_factory=lambda: [KENDALL_P_NOTE])

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=float)


def standardize_pair(real: np.ndarray, gen: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu, sd = real.mean(axis=0), real.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (real - mu) / sd, (gen - mu) / sd


def evaluate(real: Dataset, gen: Dataset, critic=None, real_encoded: np.ndarray | None = None,
             gen_encoded: np.ndarray | None = None, input_columns: Sequence[str] = INPUT_COLUMNS,
             k: int = 20, n_eval: int = 10_000, seed: int = 0) -> MetricsReport:
    """Full qualification of ``gen`` against ``real`` (both in physical units)."""
    if real.schema.continuous_names != gen.schema.continuous_names:
        raise MetricError("real and generated datasets have different continuous schemas")
    names = real.schema.continuous_names
    s_ks, ks_d = ks_score(real, gen)
    zr, zg = standardize_pair(real.continuous, gen.continuous)
    dr = dim_red_score(zr, zg)
    c_real = correlation_matrix(real.continuous, names)
    c_gen = correlation_matrix(gen.continuous, names)
    kd = kendall_score_from_matrices(c_real, c_gen)
    pol = None
    if "I_load" in names and "V_stack" in names:
        try:
            pol = polarization_error_ds(real, gen)
        except NoCommonBinError:
            pol = None
    prox = None
    if critic is not None and real_encoded is not None and gen_encoded is not None:
        idx = [names.index(c) for c in input_columns if c in names]
        if idx and len(real_encoded) >= k:
            _, summary = proximity_scores(critic, gen_encoded, real_encoded, idx, k, n_eval, seed)
            prox = asdict(summary)
    return MetricsReport(
        s_ks=s_ks, s_dim=dr.score, s_kendall=kd.score, kendall_tau=kd.tau,
        kendall_p_value=kd.p_value,
        e_v=None if pol is None else pol.e_v, e_i=None if pol is None else pol.e_i,
        ks_d=ks_d, dim_red=asdict(dr),
        polarization=None if pol is None else {k_: v for k_, v in asdict(pol).items() if k_ != "table"},
        proximity=prox, corr_real=c_real.tolist(), corr_gen=c_gen.tolist(), features=names,
        n_real=real.n_rows, n_gen=gen.n_rows,
    )

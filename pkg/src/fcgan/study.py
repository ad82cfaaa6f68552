"""Subsampling study: how generation quality holds up as the training set shrinks."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, fit_encoder, subsample
from .metrics import (correlation_matrix, dim_red_score, kendall_score_from_matrices, ks_score,
                      polarization_error_ds, standardize_pair)
from .networks import generate
from .training import TrainConfig, train

log = logging.getLogger(__name__)

METRICS = ("ks", "dim_red", "kendall", "pola_error")


def ratio_label(n_gen: int, n_real: int) -> str:
    """Generated-to-real ratio with three significant digits, e.g. ``3.24x``."""
    return f"{n_gen / n_real:.3g}x"


@dataclass
class FactorResult:
    factor: float
    n_real: int
    n_gen: int
    epochs: int
    batch_size: int
    train_minutes: float = math.nan
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    @property
    def ratio(self) -> str:
        return ratio_label(self.n_gen, self.n_real)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ratio"] = self.ratio
        return d


def score_once(full: Dataset, gen: Dataset, c_real: np.ndarray) -> dict[str, float]:
    s_ks, _ = ks_score(full, gen)
    zr, zg = standardize_pair(full.continuous, gen.continuous)
    kd = kendall_score_from_matrices(c_real, correlation_matrix(gen.continuous))
    return {"ks": s_ks, "dim_red": dim_red_score(zr, zg).score, "kendall": kd.score,
            "pola_error": polarization_error_ds(full, gen).e_v}


def run_factor(full: Dataset, f: float, cfg: TrainConfig, n_gen: int, inferences: int,
               seed: int) -> FactorResult:
    sub_seed, train_seed, gen_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(3))
    part = subsample(full, f, seed=sub_seed)
    res = FactorResult(f, part.n_rows, n_gen, cfg.epochs, cfg.batch_size)
    try:
        enc = fit_encoder(part)
        t0 = time.perf_counter()
        bundle, _ = train(enc.encode(part), dataclasses.replace(cfg, seed=train_seed), encoder=enc)
        res.train_minutes = (time.perf_counter() - t0) / 60.0
        c_real = correlation_matrix(full.continuous)
        runs = []
        for j in range(inferences):
            gen = enc.decode(generate(bundle.generator, n_gen, gen_seed + j))
            runs.append(score_once(full, gen, c_real))
        for m in METRICS:
            vals = np.array([r[m] for r in runs])
            res.mean[m] = float(vals.mean())
            res.std[m] = float(vals.std())
    except Exception as exc:  # recorded per factor; the study moves on
        log.error("factor %s failed: %s", f, exc)
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def run_study(full: Dataset, factors, cfg: TrainConfig, n_gen: int = 100_000,
              inferences: int = 100, seed: int = 0) -> list[FactorResult]:
    for f in factors:
        if not 0 < f <= 1:
            raise ValueError(f"study factors must lie in (0, 1], got {f}")
    seeds = np.random.SeedSequence(seed).generate_state(len(factors))
    out = []
    for f, s in zip(factors, seeds):
        log.info("study: factor %s", f)
        out.append(run_factor(full, f, cfg, n_gen, inferences, int(s)))
    return out


def _factor_label(f: float) -> str:
    if f == 1:
        return "f=1"
    inv = 1 / f
    return f"f=1/{round(inv)}" if abs(inv - round(inv)) < 1e-9 else f"f={f:g}"


def _cell(r: FactorResult, m: str) -> str:
    if r.error is not None or m not in r.mean:
        return "failed"
    return f"{r.mean[m]:.2f} (+-{r.std[m]:.1e})"


def table_rows(results: list[FactorResult]) -> list[list[str]]:
    rows = [["Data acquisition factor"] + [_factor_label(r.factor) for r in results],
            ["Real data (1)"] + [f"{r.n_real:,}" for r in results],
            ["Generated data (2)"] + [f"{r.n_gen:,}" for r in results],
            ["Ratio (2) / (1)"] + [r.ratio for r in results],
            ["Epochs"] + [f"{r.epochs:,}" for r in results],
            ["Batch size"] + [str(r.batch_size) for r in results],
            ["Training time (min)"] + [f"{r.train_minutes:.1f}" for r in results]]
    labels = {"ks": "KS score", "dim_red": "Dim red score", "kendall": "Kendall score",
              "pola_error": "Pola error (%)"}
    rows += [[labels[m]] + [_cell(r, m) for r in results] for m in METRICS]
    return rows


def format_table(results: list[FactorResult]) -> str:
    rows = table_rows(results)
    widths = [max(len(row[j]) for row in rows) for j in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"

"""Virtual PEM stack test bench producing corpora in the default table schema.

The voltage model is an empirical activation/ohmic/mass-transport curve; it
is a stand-in with known ground truth, not an electrochemical simulator.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DAY_CLASSES, INPUT_COLUMNS, N_CELLS, STEP_CLASSES, Dataset, TableSchema, default_schema

FARADAY = 96485.0
MOLAR_VOLUME = 22.414  # Nl/mol
O2_IN_AIR = 0.21


class GenerationError(ValueError):
    pass


def default_noise() -> dict[str, float]:
    # Gaussian sigmas; relative measurement noise stays below 1 %
    return {
        "current_stab": 1.0,      # A, regulation ripple around the nominal point
        "current_pol": 0.2,       # A
        "vcell": 0.002,           # V per cell measurement
        "cell_offset": 0.004,     # V, static cell-to-cell spread
        "cell_resistance": 0.08,  # relative spread of per-cell ohmic resistance
        "temperature": 0.2,       # degC
        "pressure": 3.0,          # mbar
        "flow_rel": 0.004,        # relative
        "humidity": 0.5,          # %
        "cooling_flow": 0.05,     # l/min
    }


def default_setpoints() -> dict[str, float]:
    return {"Tout_cooling_water": 75.0, "Tin_H2": 65.0, "Tin_Air": 65.0, "Pin_Air": 500.0,
            "Pin_H2": 500.0, "RHin_Air": 50.0, "RHin_H2": 50.0, "Q_cooling_water": 8.0}


def default_design_ranges() -> dict[str, tuple[float, float]]:
    # degraded-condition set-point ranges explored by polarization sweeps
    return {"Tout_cooling_water": (65.0, 85.0), "Tin_H2": (55.0, 75.0), "Tin_Air": (55.0, 75.0),
            "Pin_Air": (300.0, 800.0), "Pin_H2": (300.0, 800.0), "RHin_Air": (30.0, 80.0),
            "RHin_H2": (30.0, 80.0), "Q_cooling_water": (5.0, 12.0)}


@dataclass
class BenchConfig:
    rows: int = 30_901
    seed: int = 0
    n_cells: int = N_CELLS
    area_cm2: float = 220.0
    e0: float = 1.0             # V, open-circuit voltage
    tafel: float = 0.06         # V per decade of current density
    i0: float = 1e-4            # A/cm2, exchange current density
    resistance: float = 0.25    # ohm cm2
    mt_m: float = 2e-5          # V
    mt_n: float = 8.0           # cm2/A
    i_eps: float = 1e-6         # A/cm2, keeps the log finite at zero current
    lambda_h2: float = 1.2
    lambda_air: float = 2.0
    nominal_current: float = 110.0
    max_current: float = 200.0
    stab_fraction: float = 0.2
    days: int = 5
    sweeps_per_day: int = 8
    outlet_heating: float = 4.0  # degC rise of cooling outlet at max current
    noise_scale: float = 1.0
    noise: dict[str, float] = field(default_factory=default_noise)
    setpoints: dict[str, float] = field(default_factory=default_setpoints)
    design_ranges: dict[str, tuple[float, float]] = field(default_factory=default_design_ranges)

    def __post_init__(self):
        for name in ("n_cells", "area_cm2", "e0", "tafel", "i0", "resistance", "mt_n",
                     "i_eps", "lambda_h2", "lambda_air", "nominal_current", "max_current",
                     "days", "sweeps_per_day"):
            if not getattr(self, name) > 0:
                raise ValueError(f"bench parameter {name} must be positive")
        if self.mt_m < 0 or self.noise_scale < 0:
            raise ValueError("mt_m and noise_scale must be non-negative")
        if not 0 < self.stab_fraction < 1:
            raise ValueError("stab_fraction must lie in (0, 1)")
        if self.days > len(DAY_CLASSES):
            raise ValueError(f"at most {len(DAY_CLASSES)} days are supported by the schema")
        # partial overrides fall back to the defaults for unspecified channels
        self.noise = {**default_noise(), **self.noise}
        self.setpoints = {**default_setpoints(), **self.setpoints}
        self.design_ranges = {k: tuple(v) for k, v in {**default_design_ranges(),
                                                       **self.design_ranges}.items()}

    def sigma(self, channel: str) -> float:
        return self.noise_scale * self.noise.get(channel, 0.0)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["design_ranges"] = {k: list(v) for k, v in self.design_ranges.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> BenchConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown bench option(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> BenchConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def polarization_model(i, cfg: BenchConfig | None = None, resistance: float | None = None):
    """Cell voltage (V) at current density ``i`` (A/cm2), clamped to [0, 1].

    ``E0 - tafel*log10((i + i_eps)/i0) - R*i - m*exp(n*i)``
    """
    cfg = cfg or BenchConfig()
    r = cfg.resistance if resistance is None else resistance
    i = np.asarray(i, dtype=np.float64)
    v = (cfg.e0 - cfg.tafel * np.log10((i + cfg.i_eps) / cfg.i0) - r * i
         - cfg.mt_m * np.exp(cfg.mt_n * i))
    v = np.clip(v, 0.0, 1.0)
    return float(v) if v.ndim == 0 else v


def faraday_h2_flow(current, cfg: BenchConfig):
    """Hydrogen feed in Nl/min for the stack current and stoichiometry."""
    return cfg.n_cells * np.asarray(current) * 60.0 * MOLAR_VOLUME / (2 * FARADAY) * cfg.lambda_h2


def faraday_air_flow(current, cfg: BenchConfig):
    o2 = cfg.n_cells * np.asarray(current) / (4 * FARADAY)
    return o2 / O2_IN_AIR * MOLAR_VOLUME * 60.0 * cfg.lambda_air


@dataclass
class SyntheticCorpus:
    dataset: Dataset
    ground_truth: dict

    def save_ground_truth(self, path) -> None:
        Path(path).write_text(json.dumps(self.ground_truth, indent=2, sort_keys=True), encoding="utf-8")


def _split_counts(total: int, parts: int) -> list[int]:
    return [len(a) for a in np.array_split(np.arange(total), parts)]


def synth_corpus(cfg: BenchConfig, schema: TableSchema | None = None) -> SyntheticCorpus:
    if cfg.rows < 100:
        raise GenerationError(f"corpus needs at least 100 rows, got {cfg.rows}")
    schema = schema or default_schema()
    if cfg.n_cells != N_CELLS:
        raise GenerationError(f"the table schema has {N_CELLS} cell columns, config asks {cfg.n_cells}")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.rows
    n_stab = int(round(cfg.stab_fraction * n))
    n_pol = n - n_stab

    cell_offset = rng.standard_normal(cfg.n_cells) * cfg.sigma("cell_offset")
    cell_res = cfg.resistance * (1.0 + rng.standard_normal(cfg.n_cells) * cfg.sigma("cell_resistance"))

    current, step, day = [], [], []
    setp = {k: [] for k in INPUT_COLUMNS if k in cfg.setpoints}
    sweeps = []
    for dday, (ns, npol) in enumerate(zip(_split_counts(n_stab, cfg.days), _split_counts(n_pol, cfg.days))):
        # stabilization at nominal set-points
        current.append(cfg.nominal_current + rng.standard_normal(ns) * cfg.sigma("current_stab"))
        step.append(np.zeros(ns, dtype=np.int64))
        day.append(np.full(ns, dday, dtype=np.int64))
        for k in setp:
            setp[k].append(np.full(ns, cfg.setpoints[k]))
        # polarization sweeps under varied set-points
        for length in _split_counts(npol, cfg.sweeps_per_day):
            pos = (np.arange(length) + 0.5) / max(length, 1)
            current.append(cfg.max_current * pos + rng.standard_normal(length) * cfg.sigma("current_pol"))
            step.append(np.ones(length, dtype=np.int64))
            day.append(np.full(length, dday, dtype=np.int64))
            sweep = {}
            for k in setp:
                lo, hi = cfg.design_ranges[k]
                sweep[k] = float(rng.uniform(lo, hi))
                setp[k].append(np.full(length, sweep[k]))
            sweeps.append({"day": dday + 1, "rows": length, **sweep})
    current = np.clip(np.concatenate(current), 0.0, cfg.max_current)
    step = np.concatenate(step)
    day = np.concatenate(day)
    inputs = {k: np.concatenate(v) for k, v in setp.items()}

    cols: dict[str, np.ndarray] = {}
    noise_of = {"Tout_cooling_water": "temperature", "Tin_H2": "temperature", "Tin_Air": "temperature",
                "Pin_Air": "pressure", "Pin_H2": "pressure", "RHin_Air": "humidity",
                "RHin_H2": "humidity", "Q_cooling_water": "cooling_flow"}
    for k, v in inputs.items():
        cols[k] = v + rng.standard_normal(n) * cfg.sigma(noise_of[k])
    cols["Tout_cooling_water"] = cols["Tout_cooling_water"] + cfg.outlet_heating * current / cfg.max_current
    for k, flow in (("Qin_H2", faraday_h2_flow(current, cfg)), ("Qin_Air", faraday_air_flow(current, cfg))):
        noisy = flow * (1.0 + rng.standard_normal(n) * cfg.sigma("flow_rel"))
        cols[k] = np.clip(noisy, 0.0, None)

    density = current / cfg.area_cm2
    cells = np.empty((n, cfg.n_cells))
    for c in range(cfg.n_cells):
        v = polarization_model(density, cfg, resistance=cell_res[c]) + cell_offset[c]
        v = v + rng.standard_normal(n) * cfg.sigma("vcell")
        cells[:, c] = np.clip(v, 0.0, 1.0)
    cols["I_load"] = current
    cols["V_stack"] = cells.sum(axis=1)
    for c in range(cfg.n_cells):
        cols[f"Vcell_{c + 1}"] = cells[:, c]

    cont = np.column_stack([cols[name] for name in schema.continuous_names])
    cat_names = [c.name for c in schema.categorical]
    codes = np.column_stack([{"day": day, "step": step}[name] for name in cat_names]) \
        if cat_names else np.zeros((n, 0), dtype=np.int64)
    ds = Dataset(schema, cont, codes)
    bad = ds.validate().violations
    if bad:
        chans = sorted({v.column for v in bad})
        raise GenerationError(f"configuration drives channel(s) out of range: {chans}")
    truth = {
        "config": cfg.to_dict(),
        "cell_offset_V": cell_offset.tolist(),
        "cell_resistance_ohm_cm2": cell_res.tolist(),
        "sweeps": sweeps,
        "n_stabilization": n_stab,
        "n_polarization": n_pol,
        "step_classes": list(STEP_CLASSES),
    }
    return SyntheticCorpus(ds, truth)


def restrict_current(ds: Dataset, lo: float, hi: float) -> Dataset:
    """Rows with ``lo <= I_load <= hi`` (the narrow-sampling training set)."""
    cur = ds.column("I_load")
    return ds.take(np.flatnonzero((cur >= lo) & (cur <= hi)))


def expected_split(rows: int, stab_fraction: float) -> tuple[int, int]:
    n_stab = int(round(stab_fraction * rows))
    return n_stab, rows - n_stab


__all__ = ["BenchConfig", "SyntheticCorpus", "GenerationError", "polarization_model",
           "faraday_h2_flow", "faraday_air_flow", "synth_corpus", "restrict_current",
           "expected_split"]

"""Command line: synth, train, generate, evaluate, study.

Exit codes: 0 success, 2 input or configuration error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .benchsynth import BenchConfig, GenerationError, synth_corpus
from .bundle import BundleError, load_bundle, save_bundle
from .data import INPUT_COLUMNS, DataError, TableSchema, default_schema, fit_encoder, load_csv, write_csv
from .metrics import (MetricError, evaluate, polarization_error_ds, proximity_scores, triangle_export,
                      write_matrix_csv)
from .networks import generate
from .study import format_table, run_study, table_rows
from .training import TrainConfig, TrainingDivergenceError, TrainingError, train

log = logging.getLogger("fcgan")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3
TRIANGLE_FEATURES = ("I_load", "V_stack", "Qin_H2", "Qin_Air", "Tout_cooling_water", "Pin_Air")


class InputError(Exception):
    """Bad arguments, files or configs; maps to exit code 2."""


# ---------------------------------------------------------------- file helpers


@contextlib.contextmanager
def atomic_path(path: Path):
    """Yield a temp path beside ``path``; it replaces ``path`` only if the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_text_atomic(path: Path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


def write_rows_atomic(path: Path, header: list[str], rows) -> None:
    with atomic_path(path) as tmp, open(tmp, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    config_digest: str
    seed: int | None
    inputs: dict[str, str]
    outputs: dict[str, str]
    tool_version: str = __version__
    seconds: float = 0.0
    host: dict = dataclasses.field(default_factory=lambda: {
        "python": platform.python_version(), "numpy": np.__version__,
        "platform": platform.platform(), "machine": platform.machine()})

    def write(self, path: Path) -> None:
        write_text_atomic(path, json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def _manifest(args, config: dict, inputs: dict, outputs: dict, t0: float, path: Path) -> None:
    files = {k: str(v) for k, v in inputs.items()}
    outs = {}
    for k, v in outputs.items():
        v = Path(v)
        outs[k] = f"{v} sha256:{sha256_file(v)}" if v.is_file() else str(v)
    RunManifest(args.command, list(args.argv), config, config_digest(config), args.seed, files, outs,
                seconds=round(time.perf_counter() - t0, 3)).write(path)


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def _load_json(path) -> dict:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise InputError(f"config {path} must hold a JSON object")
    return d


def _schema(args) -> TableSchema:
    if getattr(args, "schema", None):
        try:
            return TableSchema.load(args.schema)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"cannot read schema {args.schema}: {exc}") from exc
    return default_schema()


def _load_data(args, path, schema=None):
    # the loader logs range violations and rejected rows itself
    ds, _ = load_csv(schema or _schema(args), path, strict=args.strict_ranges)
    return ds


def _train_config(args) -> TrainConfig:
    d = _load_json(args.config) if args.config else {}
    for key in ("epochs", "batch_size", "checkpoint_every"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    d = _load_json(args.config) if args.config else {}
    if args.rows is not None:
        d["rows"] = args.rows
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = BenchConfig.from_dict(d)
    out = Path(args.out or "corpus.csv")
    corpus = synth_corpus(cfg)
    with atomic_path(out) as tmp:
        write_csv(corpus.dataset, tmp)
    truth = _sibling(out, ".truth.json")
    write_text_atomic(truth, json.dumps(corpus.ground_truth, indent=2, sort_keys=True) + "\n")
    _manifest(args, cfg.to_dict(), {}, {"corpus": out, "ground_truth": truth}, t0,
              _sibling(out, ".manifest.json"))
    print(f"wrote {corpus.dataset.n_rows} rows to {out}")
    return EXIT_OK


def _echo_config(cfg: TrainConfig) -> None:
    print(f"training config: epochs={cfg.epochs:,} batch={cfg.batch_size} lambda={cfg.gp_weight:g} "
          f"ratio={cfg.n_critic} latent={cfg.latent_dim} lr={cfg.lr:g} "
          f"adam=({cfg.beta1:g}, {cfg.beta2:g}) seed={cfg.seed}")


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _train_config(args)
    _echo_config(cfg)
    ds = _load_data(args, args.data)
    if args.dry_run:
        print(f"dry run: {ds.n_rows} rows parsed, nothing written")
        return EXIT_OK
    out = Path(args.out or "model.bundle")
    ckpt = _sibling(out, ".ckpt")
    resume = None
    if args.resume:
        resume = load_bundle(args.resume)
        enc = resume.encoder
    else:
        enc = fit_encoder(ds)
    try:
        bundle, hist = train(enc.encode(ds), cfg, encoder=enc, checkpoint_path=ckpt, resume=resume,
                             progress_every=args.progress)
    except TrainingDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    digest = save_bundle(bundle, out)
    history = _sibling(out, ".history.csv")
    with atomic_path(history) as tmp:
        hist.to_csv(tmp)
    _manifest(args, cfg.to_dict(), {"data": args.data, "resume": args.resume or ""},
              {"bundle": out, "history": history}, t0, _sibling(out, ".manifest.json"))
    print(f"wrote {out} (sha256 {digest}), {len(hist)} epoch(s) of history")
    return EXIT_OK


def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    if args.n < 0:
        raise InputError("-n must be >= 0")
    bundle = load_bundle(args.bundle)
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out or "generated.csv")
    t1 = time.perf_counter()
    rows = generate(bundle.generator, args.n, seed)
    ds = bundle.encoder.decode(rows)
    elapsed = time.perf_counter() - t1
    with atomic_path(out) as tmp:
        write_csv(ds, tmp)
    _manifest(args, {"n": args.n}, {"bundle": args.bundle}, {"generated": out}, t0,
              _sibling(out, ".manifest.json"))
    print(f"generated {args.n} rows in {elapsed * 1000:.1f} ms, wrote {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    schema = _schema(args)
    real = _load_data(args, args.real, schema)
    gen = _load_data(args, args.gen, schema)
    out = Path(args.out or "evaluation")
    out.mkdir(parents=True, exist_ok=True)
    critic = real_enc = gen_enc = None
    if args.bundle:
        bundle = load_bundle(args.bundle)
        if bundle.schema.names != schema.names:
            raise InputError("bundle schema does not match the data schema")
        critic = bundle.critic
        real_enc, gen_enc = bundle.encoder.encode(real), bundle.encoder.encode(gen)
    seed = 0 if args.seed is None else args.seed
    report = evaluate(real, gen, critic, real_enc, gen_enc, k=args.k, n_eval=args.n_eval, seed=seed)
    outputs = {"report": out / "report.json"}
    write_text_atomic(outputs["report"], report.to_json() + "\n")
    names = report.features
    for tag, mat in (("real", report.corr_real), ("gen", report.corr_gen)):
        p = out / f"corr_{tag}.csv"
        with atomic_path(p) as tmp:
            write_matrix_csv(tmp, np.array(mat), names)
        outputs[f"corr_{tag}"] = p
    outputs["ks"] = out / "ks.csv"
    write_rows_atomic(outputs["ks"], ["feature", "D"], [(k, repr(v)) for k, v in report.ks_d.items()])
    if report.polarization is not None:
        table = polarization_error_ds(real, gen).table
        outputs["polarization_bins"] = out / "polarization_bins.csv"
        write_rows_atomic(outputs["polarization_bins"], list(table[0]),
                          [["" if v is None else v for v in row.values()] for row in table])
    if critic is not None:
        idx = [names.index(c) for c in INPUT_COLUMNS if c in names]
        scores, _ = proximity_scores(critic, gen_enc, real_enc, idx, args.k, args.n_eval, seed)
        outputs["proximity"] = out / "proximity_scores.csv"
        write_rows_atomic(outputs["proximity"], ["score"], [[repr(float(s))] for s in scores])
    tri = [f for f in args.triangle_features.split(",") if f] if args.triangle_features else \
        [f for f in TRIANGLE_FEATURES if f in names]
    missing = [f for f in tri if f not in names]
    if missing:
        raise InputError(f"unknown triangle feature(s): {missing}")
    if len(tri) >= 2:
        for p in triangle_export(real.select(tri), gen.select(tri), tri, args.bins, out):
            outputs[p.stem] = p
    _manifest(args, {"k": args.k, "n_eval": args.n_eval, "bins": args.bins, "triangle": tri},
              {"real": args.real, "gen": args.gen, "bundle": args.bundle or ""}, outputs, t0,
              out / "manifest.json")
    ev = "n/a" if report.e_v is None else f"{report.e_v:.3f}%"
    print(f"S_ks={report.s_ks:.4f} S_dim={report.s_dim:.4f} S_kendall={report.s_kendall:.4f} e_V={ev}")
    return EXIT_OK


def _parse_factor(text: str) -> float:
    text = text.strip()
    if "/" in text:
        a, b = text.split("/", 1)
        return float(a) / float(b)
    return float(text)


def cmd_study(args) -> int:
    t0 = time.perf_counter()
    try:
        factors = [_parse_factor(f) for f in args.factors.split(",")]
    except (ValueError, ZeroDivisionError) as exc:
        raise InputError(f"bad --factors {args.factors!r}: {exc}") from exc
    if not factors or any(not 0 < f <= 1 for f in factors):
        raise InputError(f"study factors must lie in (0, 1], got {args.factors}")
    cfg = _train_config(args)
    full = _load_data(args, args.data)
    seed = 0 if args.seed is None else args.seed
    results = run_study(full, factors, cfg, args.n_gen, args.inferences, seed)
    out = Path(args.out or "study")
    out.mkdir(parents=True, exist_ok=True)
    text = format_table(results)
    rows = table_rows(results)
    write_rows_atomic(out / "study.csv", rows[0], rows[1:])
    write_text_atomic(out / "study.txt", text)
    write_text_atomic(out / "study.json",
                      json.dumps([r.to_dict() for r in results], indent=2) + "\n")
    _manifest(args, {**cfg.to_dict(), "factors": factors, "n_gen": args.n_gen,
                     "inferences": args.inferences}, {"data": args.data},
              {"csv": out / "study.csv", "table": out / "study.txt", "json": out / "study.json"},
              t0, out / "manifest.json")
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    common.add_argument("--config", default=None, help="JSON config file for the command")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--strict-ranges", action="store_true",
                        help="treat out-of-range CSV values as errors")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
    common.add_argument("--schema", default=None, help="table schema JSON (default: bench schema)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fcgan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a virtual test-bench corpus")
    s.add_argument("--rows", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a generator/critic bundle")
    s.add_argument("data")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--checkpoint-every", type=int, default=None)
    s.add_argument("--resume", default=None, help="bundle or checkpoint to continue from")
    s.add_argument("--progress", type=int, default=0, help="log every N epochs")
    s.add_argument("--dry-run", action="store_true", help="parse inputs, echo the config, stop")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", parents=[common], help="sample rows from a trained bundle")
    s.add_argument("bundle")
    s.add_argument("-n", type=int, default=100_000)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="score generated rows against real rows")
    s.add_argument("real")
    s.add_argument("gen")
    s.add_argument("--bundle", default=None, help="bundle whose critic drives the proximity study")
    s.add_argument("-k", type=int, default=20)
    s.add_argument("--n-eval", type=int, default=10_000)
    s.add_argument("--bins", type=int, default=30)
    s.add_argument("--triangle-features", default=None, help="comma-separated feature names")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("study", parents=[common], help="subsampling study table")
    s.add_argument("data")
    s.add_argument("--factors", default="1,1/2,1/4")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--n-gen", type=int, default=100_000)
    s.add_argument("--inferences", type=int, default=100)
    s.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limits = threadpool_limits(args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except (InputError, DataError, BundleError, GenerationError, MetricError, TrainingError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

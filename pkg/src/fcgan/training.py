"""WGAN-GP training loop: alternating critic and generator Adam updates."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .bundle import ModelBundle, load_bundle, save_bundle
from .data import ColumnSpec, Encoder, TableSchema
from .networks import (Context, CriticNet, GeneratorConfig, GeneratorNet, build_critic,
                       build_generator)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDivergenceError(TrainingError):
    def __init__(self, epoch: int, what: str, checkpoint: str | None = None):
        self.epoch = epoch
        self.checkpoint = checkpoint
        msg = f"non-finite {what} at epoch {epoch}"
        if checkpoint:
            msg += f"; last good checkpoint: {checkpoint}"
        super().__init__(msg)


@dataclass
class TrainConfig:
    epochs: int = 25_000
    batch_size: int = 256
    lr: float = 1e-3
    gp_weight: float = 10.0
    n_critic: int = 15
    latent_dim: int = 150
    beta1: float = 0.0
    beta2: float = 0.9
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "n_critic", "latent_dim", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr", "gp_weight", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class EpochRecord:
    epoch: int
    c_loss: float
    g_loss: float
    gp: float
    score_real: float
    score_fake: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        cols = [f.name for f in dataclasses.fields(EpochRecord)]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                w.writerow([getattr(r, c) for c in cols])


def gradient_penalty(crit, x_hat: np.ndarray, ctx: Context) -> tuple[Tensor, Tensor]:
    """Mean of (||grad_x C(x_hat)||_2 - 1)^2 over rows, differentiable w.r.t. critic weights.

    Returns ``(penalty, critic_scores)``; ``ctx.graph`` must be recording.
    The dropout masks drawn for the scored forward pass are the ones the
    input gradient propagates through.
    """
    g = ctx.graph
    xh = g.input(x_hat)
    scores = crit(xh, ctx)
    grad = ad.input_gradient(ad.sum(scores), xh, create_graph=True)
    norm = ad.sqrt(ad.add(ad.sum(ad.square(grad), axis=1), 1e-12))
    gp = ad.mean(ad.square(ad.sub(norm, 1.0)))
    return gp, scores


def _check(value: float, epoch: int, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingDivergenceError(epoch, what)


def critic_step(crit: CriticNet, gen: GeneratorNet, real: np.ndarray, cfg: TrainConfig,
                rng: np.random.Generator, epoch: int = 0) -> dict[str, float]:
    n = real.shape[0]
    z = rng.standard_normal((n, gen.cfg.latent_dim))
    fake = gen(Tensor(z), Context(mode="train")).values
    eps = rng.random((n, 1))
    x_hat = eps * real + (1.0 - eps) * fake

    g = Graph()
    ctx = Context(g, "train", rng)
    s_real = ad.mean(crit(Tensor(real), ctx))
    s_fake = ad.mean(crit(Tensor(fake), ctx))
    gp, _ = gradient_penalty(crit, x_hat, ctx)
    loss = ad.add(ad.sub(s_fake, s_real), ad.mul(gp, cfg.gp_weight))
    _check(loss.item(), epoch, "critic loss")
    params = crit.parameters()
    grads = ad.backward(loss, params=params)
    ad.adam_step(params, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return {"c_loss": loss.item(), "gp": gp.item(),
            "score_real": s_real.item(), "score_fake": s_fake.item()}


def generator_step(crit: CriticNet, gen: GeneratorNet, cfg: TrainConfig,
                   rng: np.random.Generator, epoch: int = 0) -> float:
    z = rng.standard_normal((cfg.batch_size, gen.cfg.latent_dim))
    g = Graph()
    ctx = Context(g, "train", rng)
    loss = ad.neg(ad.mean(crit(gen(Tensor(z), ctx), ctx)))
    _check(loss.item(), epoch, "generator loss")
    params = gen.parameters()
    grads = ad.backward(loss, params=params)
    ad.adam_step(params, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return loss.item()


def plain_schema(width: int) -> TableSchema:
    """All-continuous schema for bare matrices (columns x0, x1, ...)."""
    return TableSchema(tuple(ColumnSpec(f"x{i}", "continuous", "", -math.inf, math.inf)
                             for i in range(width)))


def init_bundle(cfg: TrainConfig, schema: TableSchema, encoder: Encoder | None = None) -> ModelBundle:
    gen_seed, crit_seed, _ = np.random.SeedSequence(cfg.seed).generate_state(3)
    gcfg = GeneratorConfig(schema.d, schema.class_counts, cfg.latent_dim)
    gen = build_generator(gcfg, int(gen_seed))
    crit = build_critic(schema.encoded_width, int(crit_seed))
    if encoder is None:
        encoder = Encoder(schema, np.zeros(schema.d), np.ones(schema.d))
    return ModelBundle(gen, crit, encoder, schema, cfg.to_dict(), cfg.seed,
                       {"epoch": 0, "param_count": {"generator": gen.param_count(),
                                                    "critic": crit.param_count()}})


def _rng_from(cfg: TrainConfig) -> np.random.Generator:
    ss = np.random.SeedSequence(cfg.seed).spawn(1)[0]
    return np.random.Generator(np.random.PCG64(ss))


def train(real: np.ndarray, cfg: TrainConfig, encoder: Encoder | None = None,
          schema: TableSchema | None = None, checkpoint_path=None,
          resume: ModelBundle | str | Path | None = None,
          progress_every: int = 0) -> tuple[ModelBundle, TrainHistory]:
    """Train on an encoded matrix; one epoch is ``n_critic`` critic updates then one generator update."""
    real = np.asarray(real, dtype=np.float64)
    if schema is None:
        schema = encoder.schema if encoder is not None else plain_schema(real.shape[1])
    if real.ndim != 2 or real.shape[1] != schema.encoded_width:
        raise TrainingError(f"training matrix must have width {schema.encoded_width}, got {real.shape}")
    if real.shape[0] < cfg.batch_size:
        raise TrainingError(f"need at least batch_size={cfg.batch_size} rows, got {real.shape[0]}")

    rng = _rng_from(cfg)
    start = 0
    if resume is not None:
        bundle = load_bundle(resume) if isinstance(resume, (str, Path)) else resume
        start = int(bundle.metadata.get("epoch", 0))
        if "rng_state" in bundle.metadata:
            rng.bit_generator.state = bundle.metadata["rng_state"]
        bundle.train_config = cfg.to_dict()
    else:
        bundle = init_bundle(cfg, schema, encoder)
    gen, crit = bundle.generator, bundle.critic
    history = TrainHistory()
    last_ckpt = None
    n = real.shape[0]
    t0 = time.perf_counter()
    for epoch in range(start + 1, cfg.epochs + 1):
        try:
            acc = {"c_loss": 0.0, "gp": 0.0, "score_real": 0.0, "score_fake": 0.0}
            for _ in range(cfg.n_critic):
                batch = real[rng.integers(0, n, cfg.batch_size)]
                for k, v in critic_step(crit, gen, batch, cfg, rng, epoch).items():
                    acc[k] += v / cfg.n_critic
            g_loss = generator_step(crit, gen, cfg, rng, epoch)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(exc.epoch, "loss", last_ckpt) from exc
        history.records.append(EpochRecord(epoch, acc["c_loss"], g_loss, acc["gp"],
                                           acc["score_real"], acc["score_fake"],
                                           time.perf_counter() - t0))
        if progress_every and epoch % progress_every == 0:
            log.info("epoch %d: c_loss=%.4f g_loss=%.4f gp=%.4f", epoch, acc["c_loss"],
                     g_loss, acc["gp"])
        if checkpoint_path is not None and epoch % cfg.checkpoint_every == 0:
            bundle.metadata.update(epoch=epoch, rng_state=rng.bit_generator.state)
            save_bundle(bundle, checkpoint_path)
            last_ckpt = str(checkpoint_path)
    bundle.metadata.update(epoch=max(start, cfg.epochs), rng_state=rng.bit_generator.state)
    return bundle, history

"""Generator and critic networks for mixed continuous/categorical rows.

Layer widths follow the tabular WGAN-GP layout: a shared input trunk
(150 -> 256 -> 128 -> 64 -> 32), one continuous head producing ``d`` values
and one softmax head per categorical variable, concatenated into a row of
width ``D = d + sum(k_i)``. The critic is an 11-layer LeakyReLU MLP with
dropout in the middle of the stack and no batch normalization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ActivationSpec, Graph, Parameter, Tensor

log = logging.getLogger(__name__)

LEAK = 0.2
BN_MOMENTUM = 0.99
BN_EPS = 1e-5
CRITIC_WIDTHS = (256, 128, 128, 128, 64, 64, 32, 32, 16, 16, 1)
CRITIC_DROPOUT = (0.0, 0.0, 0.0, 0.5, 0.5, 0.2, 0.2, 0.0, 0.0, 0.0)
TRUNK_WIDTHS = (256, 128, 64, 32)
TRUNK_SIGNS = (1, -1, 1, -1)


class NetworkError(ValueError):
    pass


@dataclass
class Context:
    """Forward-pass settings: optional recording graph, mode and dropout rng."""

    graph: Graph | None = None
    mode: str = "infer"
    rng: np.random.Generator | None = None

    def p(self, param: Parameter) -> Tensor:
        if self.graph is None:
            return Tensor(param.value)
        return self.graph.param(param)

    @property
    def train(self) -> bool:
        return self.mode == "train"


class Layer:
    kind = "layer"

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def width(self) -> int:
        raise NotImplementedError


class Dense(Layer):
    kind = "Dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = ""):
        if n_in < 1 or n_out < 1:
            raise NetworkError(f"invalid dense widths {n_in} -> {n_out}")
        # He-style uniform bound on fan-in
        bound = np.sqrt(6.0 / n_in)
        self.W = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), f"{name}.W")
        self.b = Parameter(np.zeros(n_out), f"{name}.b")

    @property
    def width(self) -> int:
        return self.W.shape[1]

    def parameters(self):
        return [self.W, self.b]

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        return ad.affine(x, ctx.p(self.W), ctx.p(self.b))


class BatchNorm(Layer):
    """Batch norm; stores gamma, beta, running mean and running variance."""

    kind = "BatchNorm"

    def __init__(self, w: int, name: str = ""):
        self.gamma = Parameter(np.ones(w), f"{name}.gamma")
        self.beta = Parameter(np.zeros(w), f"{name}.beta")
        self.running_mean = np.zeros(w)
        self.running_var = np.ones(w)
        self.name = name

    @property
    def width(self) -> int:
        return self.gamma.size

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    @property
    def n_params(self) -> int:
        return 4 * self.width

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        out = ad.batch_norm(x, ctx.p(self.gamma), ctx.p(self.beta), mode=ctx.mode,
                            running_mean=self.running_mean, running_var=self.running_var,
                            eps=BN_EPS)
        if ctx.train:
            xv = x.values
            self.running_mean *= BN_MOMENTUM
            self.running_mean += (1 - BN_MOMENTUM) * xv.mean(axis=0)
            self.running_var *= BN_MOMENTUM
            self.running_var += (1 - BN_MOMENTUM) * xv.var(axis=0)
        return out


class SLR(Layer):
    kind = "SLR"

    def __init__(self, sign: int, width: int, p0: float = 1.0, q0: float = 0.25, name: str = ""):
        self.spec = ActivationSpec("slr", sign=sign)
        self.p = Parameter(p0, f"{name}.p")
        self.q = Parameter(q0, f"{name}.q")
        self._width = width

    @property
    def width(self) -> int:
        return self._width

    def parameters(self):
        return [self.p, self.q]

    def __call__(self, x, ctx):
        return ad.activate(self.spec, x, (ctx.p(self.p), ctx.p(self.q)))


class LeakyReLU(Layer):
    kind = "LeakyReLU"

    def __init__(self, width: int, alpha: float = LEAK):
        self.spec = ActivationSpec("leaky_relu", alpha=alpha)
        self._width = width

    @property
    def width(self):
        return self._width

    def __call__(self, x, ctx):
        return ad.activate(self.spec, x)


class Softmax(Layer):
    kind = "Softmax"

    def __init__(self, width: int):
        self._width = width

    @property
    def width(self):
        return self._width

    def __call__(self, x, ctx):
        return ad.softmax(x)


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, width: int, rate: float):
        if not 0.0 <= rate < 1.0:
            raise NetworkError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self._width = width

    @property
    def width(self):
        return self._width

    def __call__(self, x, ctx):
        return ad.dropout(x, self.rate, mode=ctx.mode, rng=ctx.rng)


class Sequential:
    def __init__(self, name: str, layers: Sequence[Layer]):
        self.name = name
        self.layers = list(layers)

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        for layer in self.layers:
            x = layer(x, ctx)
        return x

    @property
    def width(self) -> int:
        return self.layers[-1].width


class Network:
    """Shared bookkeeping: parameters, buffers, state export and layer audit."""

    blocks: list[Sequential]

    def named_layers(self) -> Iterator[tuple[str, Layer]]:
        for block in self.blocks:
            for i, layer in enumerate(block.layers):
                yield f"{block.name}.{i}.{layer.kind}", layer

    def parameters(self) -> list[Parameter]:
        return [p for _, layer in self.named_layers() for p in layer.parameters()]

    def layer_table(self) -> list[tuple[str, str, int, int]]:
        """Rows of (name, kind, output width, stored parameter count)."""
        return [(name, layer.kind, layer.width, layer.n_params)
                for name, layer in self.named_layers()]

    def param_count(self) -> int:
        return sum(row[3] for row in self.layer_table())

    def state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, layer in self.named_layers():
            for p in layer.parameters():
                out[f"{name}.{p.name.rsplit('.', 1)[-1]}"] = p.value
            for key, buf in layer.buffers().items():
                out[f"{name}.{key.rsplit('.', 1)[-1]}"] = buf
        return out

    def optimizer_state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, layer in self.named_layers():
            for p in layer.parameters():
                key = f"{name}.{p.name.rsplit('.', 1)[-1]}"
                out[f"{key}.adam_m"] = p.m
                out[f"{key}.adam_v"] = p.v
                out[f"{key}.adam_t"] = np.array([p.t], dtype=np.float64)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        current = self.state()
        missing = set(current) - set(arrays)
        if missing:
            raise NetworkError(f"missing weights: {sorted(missing)[:5]}")
        for key, target in current.items():
            src = np.asarray(arrays[key], dtype=np.float64)
            if src.shape != target.shape:
                raise NetworkError(f"weight {key} has shape {src.shape}, expected {target.shape}")
            target[...] = src
        for name, layer in self.named_layers():
            for p in layer.parameters():
                key = f"{name}.{p.name.rsplit('.', 1)[-1]}"
                if f"{key}.adam_m" in arrays:
                    p.m[...] = arrays[f"{key}.adam_m"]
                    p.v[...] = arrays[f"{key}.adam_v"]
                    p.t = int(arrays[f"{key}.adam_t"][0])


@dataclass
class GeneratorConfig:
    d: int
    class_counts: tuple[int, ...] = ()
    latent_dim: int = 150
    alpha: float = LEAK
    slr_p: float = 1.0
    slr_q: float = 0.25

    def __post_init__(self):
        self.class_counts = tuple(int(k) for k in self.class_counts)
        if self.latent_dim < 1:
            raise NetworkError("latent_dim must be >= 1")
        if self.d < 1:
            raise NetworkError("the generator needs at least one continuous column")
        if any(k < 2 for k in self.class_counts):
            raise NetworkError(f"categorical class counts must be >= 2, got {self.class_counts}")

    @property
    def output_width(self) -> int:
        return self.d + sum(self.class_counts)


class GeneratorNet(Network):
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        self.cfg = cfg
        trunk: list[Layer] = []
        n_in = cfg.latent_dim
        for i, (w, s) in enumerate(zip(TRUNK_WIDTHS, TRUNK_SIGNS)):
            trunk += [Dense(n_in, w, rng, f"trunk.{i}.dense"),
                      BatchNorm(w, f"trunk.{i}.bn"),
                      SLR(s, w, cfg.slr_p, cfg.slr_q, f"trunk.{i}.slr")]
            n_in = w
        d = cfg.d
        cont: list[Layer] = [
            Dense(32, 4 * d, rng, "cont.0.dense"), BatchNorm(4 * d, "cont.0.bn"),
            SLR(-1, 4 * d, cfg.slr_p, cfg.slr_q, "cont.0.slr"),
            Dense(4 * d, 2 * d, rng, "cont.1.dense"), BatchNorm(2 * d, "cont.1.bn"),
            SLR(1, 2 * d, cfg.slr_p, cfg.slr_q, "cont.1.slr"),
            Dense(2 * d, d, rng, "cont.2.dense"),
        ]
        self.trunk = Sequential("trunk", trunk)
        self.continuous = Sequential("continuous", cont)
        self.categorical = []
        for j, k in enumerate(cfg.class_counts):
            pre = f"cat{j}"
            self.categorical.append(Sequential(pre, [
                Dense(32, 4 * k, rng, f"{pre}.0.dense"), BatchNorm(4 * k, f"{pre}.0.bn"),
                LeakyReLU(4 * k, cfg.alpha),
                Dense(4 * k, 2 * k, rng, f"{pre}.1.dense"), BatchNorm(2 * k, f"{pre}.1.bn"),
                LeakyReLU(2 * k, cfg.alpha),
                Dense(2 * k, k, rng, f"{pre}.2.dense"), BatchNorm(k, f"{pre}.2.bn"),
                Softmax(k),
            ]))
        self.blocks = [self.trunk, self.continuous, *self.categorical]

    @property
    def output_width(self) -> int:
        return self.cfg.output_width

    def __call__(self, z: Tensor, ctx: Context) -> Tensor:
        if z.shape[1] != self.cfg.latent_dim:
            raise NetworkError(f"latent width {z.shape[1]} != {self.cfg.latent_dim}")
        h = self.trunk(z, ctx)
        outs = [self.continuous(h, ctx)] + [head(h, ctx) for head in self.categorical]
        return ad.concat(outs)


class CriticNet(Network):
    def __init__(self, input_width: int, rng: np.random.Generator, alpha: float = LEAK):
        if input_width < 1:
            raise NetworkError("critic input width must be >= 1")
        self.input_width = input_width
        layers: list[Layer] = []
        n_in = input_width
        for i, w in enumerate(CRITIC_WIDTHS):
            layers.append(Dense(n_in, w, rng, f"critic.{i}.dense"))
            if i < len(CRITIC_DROPOUT):
                layers += [LeakyReLU(w, alpha), Dropout(w, CRITIC_DROPOUT[i])]
            n_in = w
        self.body = Sequential("critic", layers)
        self.blocks = [self.body]

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        if x.shape[1] != self.input_width:
            raise NetworkError(f"critic expects width {self.input_width}, got {x.shape[1]}")
        return self.body(x, ctx)


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> GeneratorNet:
    gen = GeneratorNet(cfg, np.random.default_rng(seed))
    log.info("generator built: %d stored parameters", gen.param_count())
    return gen


def build_critic(input_width: int, seed: int = 0) -> CriticNet:
    return CriticNet(input_width, np.random.default_rng(seed))


GENERATE_CHUNK = 20_000


def generate(gen: GeneratorNet, n: int, seed: int) -> np.ndarray:
    """Encoded rows from N(0, I) latent draws through the frozen generator."""
    width = gen.output_width
    if n <= 0:
        return np.empty((0, width))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, gen.cfg.latent_dim))
    ctx = Context(mode="infer")
    out = np.empty((n, width))
    for start in range(0, n, GENERATE_CHUNK):
        stop = min(n, start + GENERATE_CHUNK)
        out[start:stop] = gen(Tensor(z[start:stop]), ctx).values
    return out


def critic_score(crit: CriticNet, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != crit.input_width:
        raise NetworkError(f"critic expects rows of width {crit.input_width}, got {rows.shape}")
    if len(rows) == 0:
        return np.empty(0)
    ctx = Context(mode="infer")
    out = np.empty(len(rows))
    for start in range(0, len(rows), GENERATE_CHUNK):
        stop = min(len(rows), start + GENERATE_CHUNK)
        out[start:stop] = crit(Tensor(rows[start:stop]), ctx).values[:, 0]
    return out

"""Residual multi-graph convolutional encoder-decoder (ST-ED-RMGC).

Spatial encoder: convolutional RMGC block -> identity RMGC block -> flatten
-> dense latent. Temporal encoder: the lag window transposed to
``[B, T, N]`` through a stacked LSTM, whole output sequence flattened ->
dense latent. The two latents are concatenated, expanded back to N, and
decoded by another conv + identity RMGC pair and a final linear MGC layer.

All parameters live in ``net.params`` (name -> Tensor); 2-D weights are
listed in ``net.weight_names`` and are the only ones L2-regularized.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import container
from . import tensor_core as tc
from .errors import ConfigError
from .tensor_core import Tensor

N_LAGS = 4


# ---------------------------------------------------------------- layers


@dataclass(frozen=True)
class MGCLayer:
    """Names one MGC weight ``[(K*F), O]``; MGC layers carry no bias."""

    weight: str
    K: int
    F: int
    O: int
    activation: str = "relu"


def stack_graphs(a_stack) -> Tensor:
    """Concatenate ``[K, N, N]`` normalized matrices row-wise into ``[K*N, N]``."""
    A = a_stack.data if isinstance(a_stack, Tensor) else np.asarray(a_stack, dtype=np.float64)
    if A.ndim == 2:
        A = A[None]
    if A.ndim != 3 or A.shape[1] != A.shape[2]:
        raise ConfigError(f"graph stack must be [K, N, N], got {A.shape}")
    return Tensor(A.reshape(-1, A.shape[2]))


def mgc_forward(W: Tensor, a_cat: Tensor, H: Tensor, K: int, activation: str = "relu") -> Tensor:
    """One multi-graph convolution.

    ``a_cat`` is the ``[K*N, N]`` stack from :func:`stack_graphs`, shared by
    every batch element. Per graph k the node signal is propagated as
    ``A_k H``; the K results are laid side by side per node (graph-major
    inside each node's ``K*F`` feature row) and mixed by ``W``.
    """
    if a_cat.shape[0] % a_cat.shape[1] or a_cat.shape[0] // a_cat.shape[1] != K:
        raise ConfigError(f"layer expects K={K} graphs, stack holds {a_cat.shape[0] // a_cat.shape[1]}")
    B, N, F = H.shape
    if W.shape[0] != K * F:
        raise ConfigError(f"MGC weight {W.shape} does not fit K={K}, F={F}")
    M = tc.batch_dot(a_cat, H)  # [B, K*N, F]
    M = tc.reshape(M, (B, K, N, F))
    M = tc.transpose(M, (0, 2, 1, 3))
    M = tc.reshape(M, (B, N, K * F))
    return tc.activation(activation, tc.batch_dot(M, W))


@dataclass(frozen=True)
class RMGCBlock:
    kind: str  # "identity" | "convolutional"
    main: tuple[MGCLayer, ...]
    shortcut: MGCLayer | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "convolutional"):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.kind == "identity":
            if self.shortcut is not None:
                raise ConfigError("identity block has no shortcut layer")
            if self.main[0].F != self.main[-1].O:
                raise ConfigError(
                    f"identity block needs input dim {self.main[0].F} == output dim {self.main[-1].O}"
                )
        else:
            if self.shortcut is None or self.shortcut.O != self.main[-1].O:
                raise ConfigError("convolutional block shortcut must match main-path output dim")


def rmgc_block_forward(
    block: RMGCBlock,
    params: dict[str, Tensor],
    a_cat: Tensor,
    H: Tensor,
    post_activation: str | None = "relu",
) -> Tensor:
    """Shortcut plus main path, with an optional activation after the sum."""
    if block.kind == "identity" and H.shape[-1] != block.main[-1].O:
        raise ConfigError(f"identity block fed {H.shape[-1]} features, outputs {block.main[-1].O}")
    out = H
    for layer in block.main:
        out = mgc_forward(params[layer.weight], a_cat, out, layer.K, layer.activation)
    if block.kind == "identity":
        short = H
    else:
        s = block.shortcut
        short = mgc_forward(params[s.weight], a_cat, H, s.K, s.activation)
    total = tc.add(short, out)
    if post_activation:
        total = tc.activation(post_activation, total)
    return total


def make_block(
    prefix: str, kind: str, K: int, F: int, widths: Sequence[int], activation: str
) -> tuple[RMGCBlock, dict[str, tuple[int, int]]]:
    shapes: dict[str, tuple[int, int]] = {}
    main = []
    fin = F
    for k, w in enumerate(widths):
        name = f"{prefix}.main{k}.W"
        main.append(MGCLayer(name, K, fin, w, activation))
        shapes[name] = (K * fin, w)
        fin = w
    shortcut = None
    if kind == "convolutional":
        name = f"{prefix}.shortcut.W"
        # shortcut is a linear projection, as in ResNet projection shortcuts
        shortcut = MGCLayer(name, K, F, widths[-1], "linear")
        shapes[name] = (K * F, widths[-1])
    return RMGCBlock(kind, tuple(main), shortcut), shapes


# ---------------------------------------------------------------- LSTM


def lstm_shapes(prefix: str, n_in: int, hidden: Sequence[int]) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    fin = n_in
    for k, h in enumerate(hidden):
        shapes[f"{prefix}.l{k}.Wx"] = (fin, 4 * h)
        shapes[f"{prefix}.l{k}.Wh"] = (h, 4 * h)
        shapes[f"{prefix}.l{k}.b"] = (4 * h,)
        fin = h
    return shapes


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One step; gate blocks in order input, forget, cell candidate, output."""
    H = Wh.shape[0]
    z = tc.add(tc.affine(x, Wx, b), tc.matmul(h, Wh))
    i = tc.activation("sigmoid", tc.narrow(z, 0, H))
    f = tc.activation("sigmoid", tc.narrow(z, H, 2 * H))
    g = tc.activation("tanh", tc.narrow(z, 2 * H, 3 * H))
    o = tc.activation("sigmoid", tc.narrow(z, 3 * H, 4 * H))
    c_new = tc.add(tc.mul(f, c), tc.mul(i, g))
    h_new = tc.mul(o, tc.activation("tanh", c_new))
    return h_new, c_new


def lstm_forward(params: dict[str, Tensor], prefix: str, seq: Tensor, hidden: Sequence[int]) -> list[Tensor]:
    """Run stacked LSTM layers over ``seq`` ``[B, T, F]``; return top-layer states per step."""
    B, T, _ = seq.shape
    steps = [tc.take(seq, t, axis=1) for t in range(T)]
    for k, hsz in enumerate(hidden):
        Wx, Wh, b = (params[f"{prefix}.l{k}.{n}"] for n in ("Wx", "Wh", "b"))
        h = Tensor(np.zeros((B, hsz)))
        c = Tensor(np.zeros((B, hsz)))
        outs = []
        for x in steps:
            h, c = lstm_cell(x, h, c, Wx, Wh, b)
            outs.append(h)
        steps = outs
    return steps


# ---------------------------------------------------------------- parameters


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


class Network:
    """Shared plumbing: parameter table, init, checkpoint I/O.

    Subclasses pass their ordered ``name -> shape`` table and implement
    ``_forward(x, a_stack=None) -> Tensor [B, N, 1]`` on scaled demand.
    """

    kind = "network"
    needs_graphs = False

    def __init__(self, arch, shapes: dict[str, tuple], demand_scale: float = 1.0):
        self.arch = arch
        self.shapes = shapes
        # fixed divisor applied to inputs and undone on outputs; not trained
        self.demand_scale = float(demand_scale)
        self.params: dict[str, Tensor] = {
            n: Tensor(np.zeros(s), requires_grad=True, name=n) for n, s in shapes.items()
        }

    @property
    def weight_names(self) -> list[str]:
        return [n for n, s in self.shapes.items() if len(s) == 2]

    def init_params(self, seed: int) -> "Network":
        """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
        rng = np.random.default_rng(seed)
        for name, shape in self.shapes.items():
            if len(shape) == 2:
                value = glorot_uniform(rng, shape)
            else:
                value = np.zeros(shape)
                if ".l" in name and name.endswith(".b") and shape[0] % 4 == 0:
                    hsz = shape[0] // 4
                    value[hsz : 2 * hsz] = 1.0
            self.params[name] = Tensor(value, requires_grad=True, name=name)
        return self

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, shape in self.shapes.items():
            if n not in state:
                raise ConfigError(f"checkpoint lacks parameter {n!r}")
            if tuple(state[n].shape) != tuple(shape):
                raise ConfigError(f"parameter {n!r}: checkpoint shape {state[n].shape}, model {shape}")
            self.params[n] = Tensor(np.array(state[n]), requires_grad=True, name=n)
        extra = set(state) - set(self.shapes)
        if extra:
            raise ConfigError(f"checkpoint carries unknown parameters {sorted(extra)}")

    def descriptor(self) -> dict:
        return {"kind": self.kind, "demand_scale": self.demand_scale, **asdict(self.arch)}

    def predict(self, X: np.ndarray, a_stack=None) -> np.ndarray:
        """Numpy convenience: ``[B, N, 4]`` lag windows -> ``[B, N]`` raw predictions."""
        return self.forward(Tensor(X), a_stack).data[..., 0].copy()

    def forward(self, x: Tensor, a_stack=None) -> Tensor:
        """Lag windows ``[B, N, 4]`` -> predictions ``[B, N, 1]`` in demand units."""
        if self.demand_scale == 1.0:
            return self._forward(x, a_stack)
        out = self._forward(tc.mul(x, Tensor(1.0 / self.demand_scale)), a_stack)
        return tc.mul(out, Tensor(self.demand_scale))

    def _forward(self, x: Tensor, a_stack=None) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


# ---------------------------------------------------------------- ST-ED-RMGC


@dataclass(frozen=True)
class Architecture:
    N: int
    K: int = 7
    widths: tuple[int, ...] = (32, 32, 128)
    lstm_hidden: tuple[int, ...] = (128, 64)
    latent_spatial: int | None = None  # defaults to N
    latent_temporal: int = 100
    activation: str = "relu"
    post_sum_activation: bool = True
    n_lags: int = N_LAGS

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "lstm_hidden", tuple(int(h) for h in self.lstm_hidden))
        if self.latent_spatial is None:
            object.__setattr__(self, "latent_spatial", int(self.N))
        if self.N < 1 or self.K < 1 or not self.widths or not self.lstm_hidden:
            raise ConfigError(f"invalid architecture {self}")
        if self.activation not in tc.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


class STEDRMGC(Network):
    kind = "st-ed-rmgc"
    needs_graphs = True

    def __init__(self, arch: Architecture, demand_scale: float = 1.0):
        a = arch
        shapes: dict[str, tuple] = {}
        self.enc_conv, s = make_block("enc.conv", "convolutional", a.K, a.n_lags, a.widths, a.activation)
        shapes.update(s)
        self.enc_ident, s = make_block("enc.ident", "identity", a.K, a.widths[-1], a.widths, a.activation)
        shapes.update(s)
        shapes["enc.latent.W"] = (a.N * a.widths[-1], a.latent_spatial)
        shapes["enc.latent.b"] = (a.latent_spatial,)
        shapes.update(lstm_shapes("lstm", a.N, a.lstm_hidden))
        shapes["lstm.latent.W"] = (a.n_lags * a.lstm_hidden[-1], a.latent_temporal)
        shapes["lstm.latent.b"] = (a.latent_temporal,)
        shapes["dec.expand.W"] = (a.latent_spatial + a.latent_temporal, a.N)
        shapes["dec.expand.b"] = (a.N,)
        self.dec_conv, s = make_block("dec.conv", "convolutional", a.K, 1, a.widths, a.activation)
        shapes.update(s)
        self.dec_ident, s = make_block("dec.ident", "identity", a.K, a.widths[-1], a.widths, a.activation)
        shapes.update(s)
        self.out_layer = MGCLayer("dec.out.W", a.K, a.widths[-1], 1, "linear")
        shapes["dec.out.W"] = (a.K * a.widths[-1], 1)
        super().__init__(arch, shapes, demand_scale)

    @property
    def _post(self) -> str | None:
        return self.arch.activation if self.arch.post_sum_activation else None

    def _graphs(self, a_stack) -> Tensor:
        if a_stack is None:
            raise ConfigError("ST-ED-RMGC needs the normalized graph stack")
        a_cat = a_stack if isinstance(a_stack, Tensor) and a_stack.ndim == 2 else stack_graphs(a_stack)
        if a_cat.shape != (self.arch.K * self.arch.N, self.arch.N):
            raise ConfigError(
                f"graph stack {a_cat.shape} does not match model N={self.arch.N}, K={self.arch.K}"
            )
        return a_cat

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 3 or x.shape[1:] != (self.arch.N, self.arch.n_lags):
            raise ConfigError(f"input must be [B, {self.arch.N}, {self.arch.n_lags}], got {x.shape}")

    def spatial_encode(self, x: Tensor, a_stack) -> Tensor:
        self._check_input(x)
        a_cat = self._graphs(a_stack)
        p = self.params
        h = rmgc_block_forward(self.enc_conv, p, a_cat, x, self._post)
        h = rmgc_block_forward(self.enc_ident, p, a_cat, h, self._post)
        h = tc.flatten(h)
        return tc.activation(self.arch.activation, tc.affine(h, p["enc.latent.W"], p["enc.latent.b"]))

    def temporal_encode(self, x: Tensor) -> Tensor:
        self._check_input(x)
        return temporal_latent(self.params, "lstm", x, self.arch.lstm_hidden, self.arch.activation)

    def decode(self, latent: Tensor, a_stack) -> Tensor:
        a_cat = self._graphs(a_stack)
        p = self.params
        z = tc.activation(self.arch.activation, tc.affine(latent, p["dec.expand.W"], p["dec.expand.b"]))
        h = tc.reshape(z, (z.shape[0], self.arch.N, 1))
        h = rmgc_block_forward(self.dec_conv, p, a_cat, h, self._post)
        h = rmgc_block_forward(self.dec_ident, p, a_cat, h, self._post)
        return mgc_forward(p[self.out_layer.weight], a_cat, h, self.out_layer.K, "linear")

    def _forward(self, x: Tensor, a_stack=None) -> Tensor:
        a_cat = self._graphs(a_stack)
        latent = tc.concat([self.spatial_encode(x, a_cat), self.temporal_encode(x)], axis=-1)
        return self.decode(latent, a_cat)


def temporal_latent(params, prefix: str, x: Tensor, hidden: Sequence[int], activation: str) -> Tensor:
    """Spatial LSTM latent: ``[B, N, T]`` -> ``[B, T, N]`` -> LSTM -> flatten -> dense."""
    seq = tc.transpose(x, (0, 2, 1))
    outs = lstm_forward(params, prefix, seq, hidden)
    flat = tc.concat(outs, axis=-1)  # same layout as flattening [B, T, H]
    return tc.activation(activation, tc.affine(flat, params[f"{prefix}.latent.W"], params[f"{prefix}.latent.b"]))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, net: Network, extra: dict | None = None) -> None:
    meta = {"architecture": net.descriptor(), "extra": extra or {}}
    container.save(path, "checkpoint", net.state_dict(), meta)


def load_checkpoint(path, expect: dict | None = None) -> tuple[Network, dict]:
    """Rebuild a network from a checkpoint.

    ``expect`` (architecture fields, e.g. ``{"N": 36, "K": 7}``) is compared
    against the stored descriptor and any mismatch raises ConfigError.
    """
    state, meta = container.load(path, expect_kind="checkpoint")
    desc = meta["architecture"]
    for key, value in (expect or {}).items():
        if desc.get(key) != value:
            raise ConfigError(
                f"checkpoint architecture mismatch on {key}: checkpoint {desc.get(key)!r}, expected {value!r}"
            )
    net = build_network(desc)
    net.load_state_dict(state)
    return net, meta.get("extra", {})


_REGISTRY: dict[str, type] = {"st-ed-rmgc": STEDRMGC}


def register(kind: str):
    def deco(cls):
        _REGISTRY[kind] = cls
        return cls

    return deco


def build_network(desc: dict) -> Network:
    kind = desc.get("kind", "st-ed-rmgc")
    if kind not in _REGISTRY:
        raise ConfigError(f"unknown network kind {kind!r}")
    cls = _REGISTRY[kind]
    arch_cls = getattr(cls, "arch_type", Architecture)
    fields_ = {
        k: (tuple(v) if isinstance(v, list) else v) for k, v in desc.items() if k not in ("kind", "demand_scale")
    }
    return cls(arch_cls(**fields_), demand_scale=desc.get("demand_scale", 1.0))

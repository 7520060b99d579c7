"""Finite-difference audit of every differentiable building block.

Each case builds a small random fixture with smooth (tanh) activations,
reduces the output to a scalar through a fixed random projection and
compares tape gradients against central differences for the input and
every parameter.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .model import (
    Architecture,
    STEDRMGC,
    lstm_cell,
    make_block,
    mgc_forward,
    rmgc_block_forward,
    stack_graphs,
)
from .tensor_core import Tensor, gradient_check

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _random_graphs(rng: np.random.Generator, K: int, N: int) -> np.ndarray:
    A = rng.random((K, N, N))
    A = (A + A.transpose(0, 2, 1)) / 2
    A /= A.sum(axis=-1, keepdims=True)
    return A


def _check_all(
    name: str,
    forward: Callable[[dict[str, Tensor]], Tensor],
    values: dict[str, np.ndarray],
    rng: np.random.Generator,
) -> CheckResult:
    """Check d(sum(proj * forward))/d(value) for every entry of ``values``."""
    out_shape = forward({k: Tensor(v) for k, v in values.items()}).shape
    proj = Tensor(rng.normal(size=out_shape))
    worst, count = 0.0, 0
    for key in values:

        def scalar(t: Tensor, key=key) -> Tensor:
            args = {k: (t if k == key else Tensor(v)) for k, v in values.items()}
            return tc.sum_all(tc.mul(forward(args), proj))

        worst = max(worst, gradient_check(scalar, values[key]))
        count += values[key].size
    return CheckResult(name, worst, count)


def check_affine(rng: np.random.Generator) -> CheckResult:
    values = {"x": rng.normal(size=(3, 4)), "W": rng.normal(size=(4, 5)), "b": rng.normal(size=5)}
    return _check_all(
        "affine", lambda p: tc.activation("tanh", tc.affine(p["x"], p["W"], p["b"])), values, rng
    )


def check_mgc(rng: np.random.Generator, K: int = 3, N: int = 5) -> CheckResult:
    a_cat = stack_graphs(_random_graphs(rng, K, N))
    values = {"H": rng.normal(size=(2, N, 3)), "W": rng.normal(size=(K * 3, 4)) * 0.5}
    return _check_all(
        "mgc", lambda p: mgc_forward(p["W"], a_cat, p["H"], K, "tanh"), values, rng
    )


def _check_block(rng: np.random.Generator, kind: str, K: int = 2, N: int = 5) -> CheckResult:
    a_cat = stack_graphs(_random_graphs(rng, K, N))
    F = 3 if kind == "convolutional" else 4
    block, shapes = make_block("blk", kind, K, F, (2, 2, 4), "tanh")
    values = {n: rng.normal(size=s) * 0.5 for n, s in shapes.items()}
    values["H"] = rng.normal(size=(2, N, F))

    def forward(p):
        return rmgc_block_forward(block, p, a_cat, p["H"], "tanh")

    return _check_all(f"rmgc_{kind}", forward, values, rng)


def check_rmgc_identity(rng: np.random.Generator) -> CheckResult:
    return _check_block(rng, "identity")


def check_rmgc_convolutional(rng: np.random.Generator) -> CheckResult:
    return _check_block(rng, "convolutional")


def check_lstm_cell(rng: np.random.Generator, n_in: int = 4, hidden: int = 3) -> CheckResult:
    values = {
        "x": rng.normal(size=(2, n_in)),
        "h": rng.normal(size=(2, hidden)),
        "c": rng.normal(size=(2, hidden)),
        "Wx": rng.normal(size=(n_in, 4 * hidden)) * 0.5,
        "Wh": rng.normal(size=(hidden, 4 * hidden)) * 0.5,
        "b": rng.normal(size=4 * hidden) * 0.5,
    }

    def forward(p):
        h, c = lstm_cell(p["x"], p["h"], p["c"], p["Wx"], p["Wh"], p["b"])
        return tc.concat([h, c], axis=-1)

    return _check_all("lstm_cell", forward, values, rng)


def check_reduced_network(rng: np.random.Generator, N: int = 6, K: int = 2) -> CheckResult:
    arch = Architecture(
        N=N, K=K, widths=(2, 2, 4), lstm_hidden=(3, 2), latent_temporal=3, activation="tanh"
    )
    net = STEDRMGC(arch).init_params(int(rng.integers(1 << 31)))
    a_cat = stack_graphs(_random_graphs(rng, K, N))
    values = {n: p.data.copy() for n, p in net.params.items()}
    values["x"] = rng.normal(size=(2, N, 4))

    def forward(p):
        net.params = {n: p[n] for n in net.shapes}
        return net.forward(p["x"], a_cat)

    try:
        return _check_all("st-ed-rmgc (reduced)", forward, values, rng)
    finally:
        net.params = {n: Tensor(v, requires_grad=True, name=n) for n, v in values.items() if n in net.shapes}


CHECKS: tuple[Callable[[np.random.Generator], CheckResult], ...] = (
    check_affine,
    check_mgc,
    check_rmgc_identity,
    check_rmgc_convolutional,
    check_lstm_cell,
    check_reduced_network,
)


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [check(rng) for check in CHECKS]

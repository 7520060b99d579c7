"""Error metrics, baseline forecasters and the comparison table.

Metrics are micro-averaged over every (instance, pair) cell. Predictions
are clamped at zero before scoring. MAPE only counts cells whose true
demand exceeds 1; when there are none it is reported as ``None``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor_core as tc
from .data import DemandCube, TrainingInstance, stack_instances
from .errors import ConfigError, DataError
from .graphs import ODPairIndex
from .model import N_LAGS, Network, lstm_shapes, lstm_forward, register, temporal_latent
from .tensor_core import Tensor

MAPE_THRESHOLD = 1.0


@dataclass
class MetricReport:
    rmse: float
    mae: float
    mape: float | None
    n_cells: int
    n_mape_cells: int
    per_pair: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {
            "rmse": self.rmse,
            "mae": self.mae,
            "mape": self.mape,
            "n_cells": self.n_cells,
            "n_mape_cells": self.n_mape_cells,
        }


def compute_metrics(predictions, targets, per_pair: bool = False) -> MetricReport:
    """RMSE, MAE and filtered MAPE over all cells.

    With ``per_pair`` the last axis is treated as the OD-pair axis and
    per-pair RMSE/MAE vectors are attached.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise DataError(f"prediction shape {p.shape} does not match target shape {y.shape}")
    if p.size == 0:
        raise DataError("no cells to score")
    p = np.maximum(p, 0.0)
    err = p - y
    rmse = math.sqrt(float(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    mask = y > MAPE_THRESHOLD
    n_mape = int(mask.sum())
    mape = float(np.mean(np.abs(err[mask]) / y[mask])) if n_mape else None
    breakdown = None
    if per_pair:
        e2 = err.reshape(-1, err.shape[-1])
        breakdown = {
            "rmse": np.sqrt(np.mean(e2 * e2, axis=0)),
            "mae": np.mean(np.abs(e2), axis=0),
        }
    return MetricReport(rmse, mae, mape, int(y.size), n_mape, breakdown)


# ---------------------------------------------------------------- historical average


def baseline_ha(cube: DemandCube, d: int, t: int, weeks: int = 4) -> np.ndarray | None:
    """Mean of the same interval on the same weekday over the previous ``weeks`` weeks."""
    if d - 7 * weeks < 0 or d >= cube.n_days:
        return None
    return np.mean([cube.values[d - 7 * k, t] for k in range(1, weeks + 1)], axis=0)


class HistoricalAverage:
    name = "HA"

    def __init__(self, cube: DemandCube, weeks: int = 4):
        self.cube = cube
        self.weeks = weeks

    def covers(self, inst: TrainingInstance) -> bool:
        return inst.key[0] - 7 * self.weeks >= 0

    def predict_instances(self, instances: Sequence[TrainingInstance]) -> np.ndarray:
        out = []
        for inst in instances:
            pred = baseline_ha(self.cube, *inst.key, weeks=self.weeks)
            if pred is None:
                raise DataError(f"HA needs {self.weeks} weeks of history before day {inst.key[0]}")
            out.append(pred)
        return np.stack(out)


# ---------------------------------------------------------------- LASSO


def soft_threshold(x: float, lam: float) -> float:
    return math.copysign(max(abs(x) - lam, 0.0), x)


def lasso_coordinate_descent(
    X: np.ndarray, y: np.ndarray, lam: float, tol: float = 1e-8, max_sweeps: int = 10_000
) -> tuple[np.ndarray, float, bool, float]:
    """Minimize ``(1/2n)||y - c - Xb||^2 + lam*||b||_1`` by cyclic coordinate descent.

    Works on the centered Gram matrix, so each sweep costs O(p^2).
    Returns ``(coef, intercept, converged, kkt_gap)``.
    """
    if lam < 0:
        raise ConfigError(f"lasso penalty must be >= 0, got {lam}")
    n, p = X.shape
    xm = X.mean(axis=0)
    ym = float(y.mean())
    Xc = X - xm
    yc = y - ym
    G = Xc.T @ Xc / n
    c = Xc.T @ yc / n
    b = np.zeros(p)
    converged = False
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(p):
            if G[j, j] == 0.0:
                continue
            rho = c[j] - G[j] @ b + G[j, j] * b[j]
            new = soft_threshold(rho, lam) / G[j, j]
            delta = max(delta, abs(new - b[j]))
            b[j] = new
        if delta < tol:
            converged = True
            break
    grad = G @ b - c
    viol = np.where(b != 0, np.abs(grad + lam * np.sign(b)), np.maximum(np.abs(grad) - lam, 0.0))
    kkt = float(viol.max()) if p else 0.0
    return b, ym - float(xm @ b), converged, kkt


class LassoBaseline:
    """Linear model on the four lag features, pooled over pairs by default."""

    name = "LASSO"

    def __init__(self, lam: float = 0.01, per_pair: bool = False, tol: float = 1e-8, max_sweeps: int = 10_000):
        self.lam = lam
        self.per_pair = per_pair
        self.tol = tol
        self.max_sweeps = max_sweeps
        self.coef: np.ndarray | None = None
        self.intercept: np.ndarray | float | None = None

    def _fit_one(self, X, y):
        b, c, ok, kkt = lasso_coordinate_descent(X, y, self.lam, self.tol, self.max_sweeps)
        if not ok:
            warnings.warn(f"LASSO did not converge; KKT gap {kkt:.3e}", RuntimeWarning, stacklevel=3)
        return b, c

    def fit(self, instances: Sequence[TrainingInstance]) -> "LassoBaseline":
        X, Y = stack_instances(instances)  # [B, N, 4], [B, N]
        if self.per_pair:
            fits = [self._fit_one(X[:, i, :], Y[:, i]) for i in range(X.shape[1])]
            self.coef = np.stack([f[0] for f in fits])
            self.intercept = np.array([f[1] for f in fits])
        else:
            self.coef, self.intercept = self._fit_one(X.reshape(-1, X.shape[-1]), Y.reshape(-1))
        return self

    def predict(self, X: np.ndarray, a_stack=None) -> np.ndarray:
        if self.coef is None:
            raise ConfigError("LASSO baseline used before fit()")
        if self.per_pair:
            return np.einsum("bnf,nf->bn", X, self.coef) + self.intercept
        return X @ self.coef + self.intercept


# ---------------------------------------------------------------- neural baselines


@dataclass(frozen=True)
class MLPArch:
    N: int
    hidden: int = 32
    n_lags: int = N_LAGS


@register("mlp")
class MLPBaseline(Network):
    """One hidden ReLU layer over each pair's four lags; weights shared by all pairs."""

    kind = "mlp"
    arch_type = MLPArch

    def __init__(self, arch: MLPArch, demand_scale: float = 1.0):
        shapes = {
            "mlp.W1": (arch.n_lags, arch.hidden),
            "mlp.b1": (arch.hidden,),
            "mlp.W2": (arch.hidden, 1),
            "mlp.b2": (1,),
        }
        super().__init__(arch, shapes, demand_scale)

    def _forward(self, x: Tensor, a_stack=None) -> Tensor:
        p = self.params
        h = tc.activation("relu", tc.affine(x, p["mlp.W1"], p["mlp.b1"]))
        return tc.affine(h, p["mlp.W2"], p["mlp.b2"])


@dataclass(frozen=True)
class PairLSTMArch:
    N: int
    hidden: int = 16
    n_lags: int = N_LAGS


@register("lstm")
class PairLSTMBaseline(Network):
    """Per-pair LSTM over the four lags (one scalar per step), shared weights."""

    kind = "lstm"
    arch_type = PairLSTMArch

    def __init__(self, arch: PairLSTMArch, demand_scale: float = 1.0):
        shapes = lstm_shapes("plstm", 1, (arch.hidden,))
        shapes["plstm.head.W"] = (arch.hidden, 1)
        shapes["plstm.head.b"] = (1,)
        super().__init__(arch, shapes, demand_scale)

    def _forward(self, x: Tensor, a_stack=None) -> Tensor:
        B, N, T = x.shape
        seq = tc.reshape(x, (B * N, T, 1))
        h = lstm_forward(self.params, "plstm", seq, (self.arch.hidden,))[-1]
        out = tc.affine(h, self.params["plstm.head.W"], self.params["plstm.head.b"])
        return tc.reshape(out, (B, N, 1))


@dataclass(frozen=True)
class SpatialLSTMArch:
    N: int
    lstm_hidden: tuple[int, ...] = (128, 64)
    latent_temporal: int = 100
    activation: str = "relu"
    n_lags: int = N_LAGS

    def __post_init__(self):
        object.__setattr__(self, "lstm_hidden", tuple(int(h) for h in self.lstm_hidden))


@register("spatial-lstm")
class SpatialLSTMBaseline(Network):
    """The temporal encoder on its own, with a linear head back to N pairs."""

    kind = "spatial-lstm"
    arch_type = SpatialLSTMArch

    def __init__(self, arch: SpatialLSTMArch, demand_scale: float = 1.0):
        shapes = lstm_shapes("lstm", arch.N, arch.lstm_hidden)
        shapes["lstm.latent.W"] = (arch.n_lags * arch.lstm_hidden[-1], arch.latent_temporal)
        shapes["lstm.latent.b"] = (arch.latent_temporal,)
        shapes["head.W"] = (arch.latent_temporal, arch.N)
        shapes["head.b"] = (arch.N,)
        super().__init__(arch, shapes, demand_scale)

    def forward_flat(self, x: Tensor) -> Tensor:
        """``[B, N, 4]`` -> ``[B, N]`` (in scaled units)."""
        a = self.arch
        latent = temporal_latent(self.params, "lstm", x, a.lstm_hidden, a.activation)
        return tc.affine(latent, self.params["head.W"], self.params["head.b"])

    def _forward(self, x: Tensor, a_stack=None) -> Tensor:
        out = self.forward_flat(x)
        return tc.reshape(out, (out.shape[0], self.arch.N, 1))


# ---------------------------------------------------------------- comparison


Predictor = Callable[[Sequence[TrainingInstance]], np.ndarray]


def network_predictor(net: Network, a_stack=None, batch_size: int = 256) -> Predictor:
    def predict(instances):
        outs = []
        for s in range(0, len(instances), batch_size):
            X, _ = stack_instances(instances[s : s + batch_size])
            outs.append(net.predict(X, a_stack))
        return np.concatenate(outs)

    return predict


def array_predictor(model, a_stack=None) -> Predictor:
    """Adapter for anything with ``predict(X [B,N,4]) -> [B,N]``."""
    if isinstance(model, Network):
        return network_predictor(model, a_stack)
    if isinstance(model, HistoricalAverage):
        return model.predict_instances
    return lambda instances: model.predict(stack_instances(instances)[0], a_stack)


def compare(
    models: Mapping[str, Predictor], test: Sequence[TrainingInstance], per_pair: bool = False
) -> list[tuple[str, MetricReport, np.ndarray]]:
    """Score every predictor on ``test``; rows sorted by RMSE (stable on ties)."""
    if not test:
        raise DataError("test set is empty")
    _, Y = stack_instances(test)
    rows = []
    for name, predict in models.items():
        pred = np.asarray(predict(test), dtype=np.float64)
        rows.append((name, compute_metrics(pred, Y, per_pair=per_pair), pred))
    rows.sort(key=lambda r: r[1].rmse)
    return rows


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


TABLE_COLUMNS = ("model", "rmse", "mae", "mape", "n_cells", "n_mape_cells")


def table_csv(rows: Sequence[tuple[str, MetricReport, np.ndarray]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for name, rep, _ in rows:
        r = rep.row()
        w.writerow([name] + [_fmt(r[c]) for c in TABLE_COLUMNS[1:]])
    return buf.getvalue()


def table_json(rows: Sequence[tuple[str, MetricReport, np.ndarray]], extra: Mapping | None = None) -> str:
    doc = {"models": [{"model": name, **rep.row()} for name, rep, _ in rows]}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def pair_grid(pairs: ODPairIndex, values: np.ndarray, zone_ids: Sequence[int] | None = None) -> tuple[list[int], np.ndarray]:
    """Arrange a per-pair vector as an origin x destination grid (NaN where no pair)."""
    zone_ids = list(zone_ids) if zone_ids is not None else sorted(pairs.zone_ids())
    pos = {z: k for k, z in enumerate(zone_ids)}
    grid = np.full((len(zone_ids), len(zone_ids)), np.nan)
    for i, (o, d) in enumerate(pairs):
        if o in pos and d in pos:
            grid[pos[o], pos[d]] = values[i]
    return zone_ids, grid


def grid_csv(zone_ids: Sequence[int], grid: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["origin\\destination", *zone_ids])
    for z, row in zip(zone_ids, grid):
        w.writerow([z, *("" if math.isnan(v) else repr(float(v)) for v in row)])
    return buf.getvalue()

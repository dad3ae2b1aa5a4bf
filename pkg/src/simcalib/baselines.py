"""Reference post-hoc calibrators.

* TS   - one global temperature, fitted by golden-section search on log T.
* VS   - per-class scale and bias, fitted by Adam (may change predictions).
* ETS  - simplex-weighted ensemble of raw / temperature-scaled / uniform
         distributions, fitted by projected gradient descent.
* CaGCN-style - a small GCN reads the logits and emits one positive
         temperature per node.

TS, ETS, and the nodewise-temperature calibrator preserve every argmax by
construction; VS carries no such guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from . import rng
from .classifier import NodeBundle
from .graph import Graph, normalized_adjacency
from .metrics import nll

__all__ = [
    "CagcnConfig",
    "CagcnModel",
    "EtsModel",
    "TsModel",
    "VsModel",
    "fit_cagcn",
    "fit_ets",
    "fit_ts",
    "fit_vs",
    "project_simplex",
]

TEMPERATURE_BOX = (0.05, 20.0)


@dataclass(frozen=True)
class TsModel:
    temperature: float

    def apply(self, logits: np.ndarray) -> np.ndarray:
        return nm.softmax_rows_np(logits / self.temperature)


@dataclass(frozen=True)
class VsModel:
    scale: np.ndarray  # per-class w
    bias: np.ndarray  # per-class b

    def apply(self, logits: np.ndarray) -> np.ndarray:
        return nm.softmax_rows_np(logits * self.scale + self.bias)


@dataclass(frozen=True)
class EtsModel:
    weights: np.ndarray  # (w_raw, w_ts, w_uniform) on the simplex
    temperature: float

    def apply(self, logits: np.ndarray) -> np.ndarray:
        k = logits.shape[1]
        components = (
            nm.softmax_rows_np(logits),
            nm.softmax_rows_np(logits / self.temperature),
            np.full_like(logits, 1.0 / k),
        )
        return sum(w * c for w, c in zip(self.weights, components))


@dataclass(frozen=True)
class CagcnModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    temp_floor: float = 0.01

    def temperatures(self, logits: np.ndarray, a_hat) -> np.ndarray:
        h = np.maximum((a_hat @ logits) @ self.w1 + self.b1, 0.0)
        raw = a_hat @ (h @ self.w2) + self.b2
        return np.maximum(nm.softplus_np(raw[:, 0]), self.temp_floor)

    def apply(self, logits: np.ndarray, a_hat) -> np.ndarray:
        t = self.temperatures(logits, a_hat)
        return nm.softmax_rows_np(logits / t[:, None])


# ---------------------------------------------------------------------------
# temperature scaling


def fit_ts(bundle: NodeBundle, cal_idx) -> TsModel:
    """Golden-section search for the NLL-minimizing global temperature.

    Returns T=1 when no temperature strictly beats it (e.g. constant
    logits), so fitting never hurts the calibration-set NLL.
    """
    cal_idx = np.asarray(cal_idx, dtype=np.int64)
    if cal_idx.size == 0:
        raise ValueError("calibration set is empty")
    z = bundle.logits[cal_idx]
    y = bundle.labels[cal_idx]

    def objective(log_t: float) -> float:
        return nll(nm.softmax_rows_np(z / np.exp(log_t)), y)

    lo, hi = np.log(TEMPERATURE_BOX[0]), np.log(TEMPERATURE_BOX[1])
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = objective(c), objective(d)
    for _ in range(80):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = objective(d)
    log_t = c if fc < fd else d
    best = float(np.exp(log_t))
    if objective(log_t) >= objective(0.0) - 1e-12:
        best = 1.0
    return TsModel(best)


# ---------------------------------------------------------------------------
# vector scaling


def fit_vs(bundle: NodeBundle, cal_idx, max_epochs: int = 500, lr: float = 0.02) -> VsModel:
    """Per-class affine rescale of the logits, fitted by Adam on NLL."""
    cal_idx = np.asarray(cal_idx, dtype=np.int64)
    if cal_idx.size == 0:
        raise ValueError("calibration set is empty")
    z = bundle.logits[cal_idx]
    y = bundle.labels[cal_idx]
    k = bundle.num_classes

    params = nm.ParamStore()
    params.add("scale", np.ones(k))
    params.add("bias", np.zeros(k))

    def loss_fn(leaves):
        scaled = nm.Tensor(z, needs_grad=False, name="logits") * leaves["scale"] + leaves["bias"]
        return nm.mean_nll(nm.softmax_rows(scaled), y)

    state = nm.AdamState.for_params(params, lr=lr, weight_decay=0.0)
    best = params.snapshot()
    best_nll = nm.evaluate_loss(loss_fn, params)
    for _ in range(max_epochs):
        cur = nm.value_and_grad(loss_fn, params)
        if cur < best_nll - 1e-12:
            best_nll = cur
            best = params.snapshot()
        nm.adam_step(params, state)
    final = nm.evaluate_loss(loss_fn, params)
    if final < best_nll - 1e-12:
        best = params.snapshot()
    return VsModel(best["scale"], best["bias"])


# ---------------------------------------------------------------------------
# ensemble temperature scaling


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / (np.arange(v.size) + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def fit_ets(bundle: NodeBundle, cal_idx, max_iters: int = 500, lr: float = 0.05) -> EtsModel:
    """Fit TS first, then simplex ensemble weights by projected gradient.

    Weights start at (0, 1, 0) (pure TS) and only strict NLL improvements
    are kept, so the result never trails the TS component.
    """
    cal_idx = np.asarray(cal_idx, dtype=np.int64)
    if cal_idx.size == 0:
        raise ValueError("calibration set is empty")
    ts = fit_ts(bundle, cal_idx)
    z = bundle.logits[cal_idx]
    y = bundle.labels[cal_idx]
    k = bundle.num_classes
    rows = np.arange(cal_idx.size)
    comp = np.stack(
        [
            nm.softmax_rows_np(z)[rows, y],
            nm.softmax_rows_np(z / ts.temperature)[rows, y],
            np.full(cal_idx.size, 1.0 / k),
        ],
        axis=1,
    )  # per-node true-label probability of each component

    def objective(w: np.ndarray) -> float:
        return float(-np.log(np.maximum(comp @ w, 1e-12)).mean())

    w = np.array([0.0, 1.0, 0.0])
    best_w, best_obj = w.copy(), objective(w)
    for _ in range(max_iters):
        grad = -(comp / np.maximum(comp @ w, 1e-12)[:, None]).mean(axis=0)
        w = project_simplex(w - lr * grad)
        cur = objective(w)
        if cur < best_obj - 1e-12:
            best_obj = cur
            best_w = w.copy()
    return EtsModel(best_w, ts.temperature)


# ---------------------------------------------------------------------------
# GCN-on-logits nodewise temperatures


@dataclass(frozen=True)
class CagcnConfig:
    hidden_dim: int = 16
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    max_epochs: int = 1000
    patience: int = 100
    temp_floor: float = 0.01
    seed: int = 0


def fit_cagcn(
    bundle: NodeBundle,
    graph: Graph,
    cal_idx,
    config: CagcnConfig = CagcnConfig(),
    selection_idx=None,
) -> CagcnModel:
    """Train the GCN-on-logits temperature model by NLL on ``cal_idx``.

    If ``selection_idx`` is given, the returned snapshot is the one with
    the best selection-set NLL (among epochs that do not degrade the fit
    NLL below its initial value); otherwise the best fit-NLL snapshot.
    """
    cal_idx = np.asarray(cal_idx, dtype=np.int64)
    if cal_idx.size == 0:
        raise ValueError("calibration set is empty")
    z = bundle.logits
    y = bundle.labels
    a_hat = normalized_adjacency(graph)
    az = a_hat @ z  # first propagation is parameter-free

    init_gen = rng.generator(config.seed, "cagcn", "init")
    limit = np.sqrt(6.0 / (bundle.num_classes + config.hidden_dim))
    params = nm.ParamStore()
    params.add("w1", init_gen.uniform(-limit, limit, size=(bundle.num_classes, config.hidden_dim)))
    params.add("b1", np.zeros(config.hidden_dim))
    params.add("w2", np.zeros((config.hidden_dim, 1)))
    params.add("b2", np.zeros(1))

    def loss_fn(leaves):
        h = nm.relu(nm.matmul(nm.Tensor(az, needs_grad=False, name="AZ"), leaves["w1"]) + leaves["b1"])
        raw = nm.spmm(a_hat, nm.matmul(h, leaves["w2"])) + leaves["b2"]
        temps = nm.clamp_min(nm.softplus(raw), config.temp_floor)
        z_cal = nm.Tensor(z[cal_idx], needs_grad=False, name="Zcal")
        probs = nm.softmax_rows(z_cal / nm.gather_rows(temps, cal_idx))
        return nm.mean_nll(probs, y[cal_idx])

    def model_from(values: dict) -> CagcnModel:
        return CagcnModel(values["w1"], values["b1"], values["w2"], values["b2"], config.temp_floor)

    def selection_nll(values: dict) -> float:
        probs = model_from(values).apply(z, a_hat)
        return nll(probs, y, selection_idx)

    state = nm.AdamState.for_params(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    init_fit = nm.evaluate_loss(loss_fn, params)
    best = params.snapshot()
    track_selection = selection_idx is not None
    best_score = selection_nll(best) if track_selection else init_fit
    stale = 0
    for _ in range(config.max_epochs):
        fit = nm.value_and_grad(loss_fn, params)
        nm.adam_step(params, state)
        fit = nm.evaluate_loss(loss_fn, params)
        if fit <= init_fit + 1e-9:
            score = selection_nll(params.snapshot()) if track_selection else fit
            if score < best_score - 1e-12:
                best_score = score
                best = params.snapshot()
                stale = 0
                continue
        stale += 1
        if stale >= config.patience:
            break
    return model_from(best)

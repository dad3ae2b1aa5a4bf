"""Similarity-aware nodewise-temperature calibrator (SimCalib).

Two branches produce per-node temperatures for the frozen classifier's
logits:

* feature branch - Mahalanobis distances from each node's hidden feature
  to per-class prototypes, normalized into a unit similarity vector, are
  propagated by a small GCN into a positive temperature T_feat;
* movement branch - attention over each closed neighborhood, scored by
  logit agreement damped by distance-to-training-set, aggregates sorted
  neighbor logits with degree-ratio weights into a positive temperature
  T_move.

The calibrated output mixes both temperature-scaled softmaxes with weight
omega, so predictions (argmaxes) are preserved exactly for every node.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import numerics as nm
from . import rng
from .classifier import NodeBundle
from .graph import Graph, hop_distance_to_set, normalized_adjacency
from .metrics import compute_report, confidences, ece, nll

__all__ = [
    "GridSearchResult",
    "PrototypeSet",
    "SimCalibConfig",
    "SimCalibModel",
    "build_prototypes",
    "class_prototypes",
    "feat_branch",
    "grid_search",
    "mahalanobis",
    "mahalanobis_all",
    "model_from_dict",
    "model_to_dict",
    "move_branch",
    "movement_attention",
    "shared_covariance",
    "similarity_matrix",
    "similarity_vector",
    "simcalib_forward",
    "train_simcalib",
]

SOFTPLUS_ONE = 0.5413248546129181  # softplus(x) = 1 at this x


# ---------------------------------------------------------------------------
# prototypes and similarity


@dataclass(frozen=True)
class PrototypeSet:
    """Per-class mean hidden features with a shared ridged covariance."""

    means: np.ndarray  # K x h
    covariance: np.ndarray | None = None
    ridge: float | None = None
    inverse: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]


def class_prototypes(hidden, labels, labeled_idx, num_classes: int) -> PrototypeSet:
    """Mean hidden feature per class over the labeled set (means only)."""
    hidden = np.asarray(hidden, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    labeled_idx = np.asarray(labeled_idx, dtype=np.int64)
    means = np.zeros((num_classes, hidden.shape[1]))
    for k in range(num_classes):
        members = labeled_idx[labels[labeled_idx] == k]
        if members.size == 0:
            raise ValueError(f"class {k} has no labeled nodes")
        means[k] = hidden[members].mean(axis=0)
    return PrototypeSet(means)


def shared_covariance(
    hidden, labels, labeled_idx, protos: PrototypeSet, ridge_scale: float = 1e-4
) -> PrototypeSet:
    """Pooled within-class covariance plus a trace-scaled ridge, inverted."""
    hidden = np.asarray(hidden, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    labeled_idx = np.asarray(labeled_idx, dtype=np.int64)
    centered = hidden[labeled_idx] - protos.means[labels[labeled_idx]]
    cov = centered.T @ centered / labeled_idx.size
    h = cov.shape[0]
    ridge = max(ridge_scale * np.trace(cov) / h, 1e-8)
    inverse = np.linalg.inv(cov + ridge * np.eye(h))
    inverse = (inverse + inverse.T) / 2.0  # keep the quadratic form exactly symmetric
    return PrototypeSet(protos.means, cov, ridge, inverse)


def build_prototypes(hidden, labels, labeled_idx, num_classes: int, ridge_scale: float = 1e-4) -> PrototypeSet:
    protos = class_prototypes(hidden, labels, labeled_idx, num_classes)
    return shared_covariance(hidden, labels, labeled_idx, protos, ridge_scale)


def mahalanobis(x, protos: PrototypeSet, k: int) -> float:
    """(x - mu_k)^T (Sigma + ridge I)^(-1) (x - mu_k)."""
    diff = np.asarray(x, dtype=np.float64) - protos.means[k]
    return float(diff @ protos.inverse @ diff)


def mahalanobis_all(hidden, protos: PrototypeSet) -> np.ndarray:
    """Distance of every row of ``hidden`` to every prototype (N x K)."""
    hidden = np.asarray(hidden, dtype=np.float64)
    diffs = hidden[:, None, :] - protos.means[None, :, :]
    return np.einsum("nkh,hg,nkg->nk", diffs, protos.inverse, diffs)


def similarity_vector(x, protos: PrototypeSet) -> np.ndarray:
    """Unit-normalized vector of prototype distances (uniform if all zero)."""
    d = np.array([mahalanobis(x, protos, k) for k in range(protos.num_classes)])
    norm = np.linalg.norm(d)
    if norm == 0.0:
        return np.full(protos.num_classes, 1.0 / np.sqrt(protos.num_classes))
    return d / norm


def similarity_matrix(hidden, protos: PrototypeSet) -> np.ndarray:
    """Row-wise unit similarity vectors for every node (N x K)."""
    d = mahalanobis_all(hidden, protos)
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    k = protos.num_classes
    out = np.where(norms > 0.0, d / np.where(norms > 0.0, norms, 1.0), 1.0 / np.sqrt(k))
    return out


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class SimCalibConfig:
    hidden_dim: int = 16
    num_heads: int = 2
    leaky_slope: float = 0.2
    temp_floor: float = 0.01
    ridge_scale: float = 1e-4
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    max_epochs: int = 2000
    patience: int = 100
    omega: float = 0.8
    t_exponent: float = 0.5
    omega_grid: tuple = (0.6, 0.8, 0.9)
    t_grid: tuple = (0.3, 0.5, 1.0)
    eval_bins: int = 15
    include_self: bool = True
    disable_feat: bool = False
    disable_move: bool = False
    disable_homophily: bool = False
    disable_reldeg: bool = False
    logits_as_sim: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not (1 <= self.num_heads <= 8):
            raise ValueError("num_heads must be between 1 and 8")
        if self.disable_feat and self.disable_move:
            raise ValueError("cannot disable both branches")
        if not (self.disable_feat or self.disable_move) and not (0.0 < self.omega < 1.0):
            raise ValueError("omega must lie strictly between 0 and 1")
        if self.temp_floor <= 0.0:
            raise ValueError("temp_floor must be positive")


@dataclass(frozen=True)
class SimCalibModel:
    feat_w1: np.ndarray
    feat_b1: np.ndarray
    feat_w2: np.ndarray
    feat_b2: np.ndarray
    heads: np.ndarray  # num_heads x K
    t_exponent: float
    omega: float
    leaky_slope: float
    temp_floor: float
    prototypes: PrototypeSet
    include_self: bool = True
    disable_feat: bool = False
    disable_move: bool = False
    disable_homophily: bool = False
    disable_reldeg: bool = False
    logits_as_sim: bool = False

    def similarity_input(self, bundle: NodeBundle) -> np.ndarray:
        if self.logits_as_sim:
            return bundle.logits
        return similarity_matrix(bundle.hidden, self.prototypes)

    def temperatures(self, bundle: NodeBundle, graph: Graph) -> tuple[np.ndarray, np.ndarray]:
        a_hat = normalized_adjacency(graph)
        eta = hop_distance_to_set(graph, bundle.masks["train"])
        t_feat = feat_branch(self.similarity_input(bundle), a_hat, self)
        t_move = move_branch(bundle.logits, graph, eta, self)
        return t_feat, t_move

    def apply(self, bundle: NodeBundle, graph: Graph) -> np.ndarray:
        t_feat, t_move = self.temperatures(bundle, graph)
        omega = _effective_omega(self)
        return simcalib_forward(bundle.logits, t_feat, t_move, omega)


def _effective_omega(model_or_config) -> float:
    if model_or_config.disable_feat:
        return 0.0
    if model_or_config.disable_move:
        return 1.0
    return model_or_config.omega


# ---------------------------------------------------------------------------
# branches


def feat_branch(similarities, a_hat, model: SimCalibModel) -> np.ndarray:
    """Two-layer GCN on the similarity rows -> positive per-node temperature."""
    s = np.asarray(similarities, dtype=np.float64)
    l1 = np.maximum((a_hat @ s) @ model.feat_w1 + model.feat_b1, 0.0)
    raw = a_hat @ (l1 @ model.feat_w2) + model.feat_b2
    return np.maximum(nm.softplus_np(raw[:, 0]), model.temp_floor)


def movement_attention(
    logits,
    eta,
    graph: Graph,
    slope: float = 0.2,
    include_self: bool = True,
    disable_homophily: bool = False,
) -> sp.csr_matrix:
    """Row-stochastic attention over each closed neighborhood.

    Scores are LeakyReLU(z_i . z_j / (eta_i eta_j)); with
    ``disable_homophily`` every row becomes uniform instead.  Rows keep
    their self entry when ``include_self`` (isolated nodes always keep it,
    so no row is empty).
    """
    logits = np.asarray(logits, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    n = graph.num_nodes
    deg = graph.degrees()
    rows = np.repeat(np.arange(n), deg)
    cols = graph.neighbors.copy()
    if include_self:
        self_rows = np.arange(n)
    else:
        self_rows = np.where(deg == 0)[0]  # keep isolated rows nonempty
    rows = np.concatenate([rows, self_rows])
    cols = np.concatenate([cols, self_rows])
    if disable_homophily:
        scores = np.zeros(rows.size)
    else:
        dots = np.einsum("ek,ek->e", logits[rows], logits[cols])
        scores = nm.leaky_relu_np(dots / (eta[rows] * eta[cols]), slope)
    mat = sp.csr_matrix((scores, (rows, cols)), shape=(n, n))
    mat.sort_indices()
    indptr, data = mat.indptr, mat.data
    row_max = np.maximum.reduceat(data, indptr[:-1])
    sizes = np.diff(indptr)
    e = np.exp(data - np.repeat(row_max, sizes))
    row_sum = np.add.reduceat(e, indptr[:-1])
    mat.data = e / np.repeat(row_sum, sizes)
    return mat


def move_branch(logits, graph: Graph, eta, model: SimCalibModel) -> np.ndarray:
    """Attention-weighted aggregation of sorted neighbor logits -> temperature.

    Per head: sum_j alpha_ij * eta_j * ((d_i+1)/(d_j+1))^t * (sorted_z_j . W).
    Head pre-activations are averaged, then softplus + floor.
    """
    alpha = movement_attention(
        logits, eta, graph, model.leaky_slope, model.include_self, model.disable_homophily
    )
    t = 0.0 if model.disable_reldeg else model.t_exponent
    coeffs = movement_coefficients(alpha, graph, eta, t)
    pre = coeffs @ np.sort(np.asarray(logits, dtype=np.float64), axis=1)[:, ::-1]
    head_mean = (pre @ model.heads.T).mean(axis=1)
    return np.maximum(nm.softplus_np(head_mean), model.temp_floor)


def movement_coefficients(alpha: sp.csr_matrix, graph: Graph, eta, t_exponent: float) -> sp.csr_matrix:
    """alpha weighted by eta_j and the degree ratio, as a sparse matrix."""
    eta = np.asarray(eta, dtype=np.float64)
    deg = graph.degrees().astype(np.float64)
    out = alpha.copy()
    rows = np.repeat(np.arange(graph.num_nodes), np.diff(out.indptr))
    cols = out.indices
    ratio = ((deg[rows] + 1.0) / (deg[cols] + 1.0)) ** t_exponent
    out.data = out.data * eta[cols] * ratio
    return out


def simcalib_forward(logits, t_feat, t_move, omega: float) -> np.ndarray:
    """omega-weighted mix of the two temperature-scaled softmaxes."""
    logits = np.asarray(logits, dtype=np.float64)
    parts = []
    if omega > 0.0:
        parts.append(omega * nm.softmax_rows_np(logits / np.asarray(t_feat)[:, None]))
    if omega < 1.0:
        parts.append((1.0 - omega) * nm.softmax_rows_np(logits / np.asarray(t_move)[:, None]))
    return sum(parts)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class _Precomp:
    """Everything frozen during training: constants of the loss."""

    a_hat: sp.csr_matrix
    prop_sim: np.ndarray  # A @ S
    move_const: np.ndarray  # coeffs @ sorted logits
    eta: np.ndarray
    fit_idx: np.ndarray
    selection_idx: np.ndarray
    logits: np.ndarray
    labels: np.ndarray


def _initial_params(config: SimCalibConfig, num_classes: int) -> nm.ParamStore:
    gen = rng.generator(config.seed, "simcalib", "init")
    params = nm.ParamStore()
    limit = np.sqrt(6.0 / (num_classes + config.hidden_dim))
    params.add("feat_w1", gen.uniform(-limit, limit, size=(num_classes, config.hidden_dim)))
    params.add("feat_b1", np.zeros(config.hidden_dim))
    # zero output weights + softplus^{-1}(1) bias: the feature branch starts
    # as the identity temperature
    params.add("feat_w2", np.zeros((config.hidden_dim, 1)))
    params.add("feat_b2", np.full(1, SOFTPLUS_ONE))
    head_limit = np.sqrt(6.0 / (num_classes + 1))
    params.add("heads", gen.uniform(-head_limit, head_limit, size=(config.num_heads, num_classes)))
    return params


def _model_from_values(values: dict, config: SimCalibConfig, protos: PrototypeSet) -> SimCalibModel:
    return SimCalibModel(
        feat_w1=values["feat_w1"],
        feat_b1=values["feat_b1"],
        feat_w2=values["feat_w2"],
        feat_b2=values["feat_b2"],
        heads=values["heads"],
        t_exponent=config.t_exponent,
        omega=config.omega,
        leaky_slope=config.leaky_slope,
        temp_floor=config.temp_floor,
        prototypes=protos,
        include_self=config.include_self,
        disable_feat=config.disable_feat,
        disable_move=config.disable_move,
        disable_homophily=config.disable_homophily,
        disable_reldeg=config.disable_reldeg,
        logits_as_sim=config.logits_as_sim,
    )


def _precompute(bundle: NodeBundle, graph: Graph, config: SimCalibConfig, protos: PrototypeSet, fit_idx, selection_idx) -> _Precomp:
    a_hat = normalized_adjacency(graph)
    eta = hop_distance_to_set(graph, bundle.masks["train"])
    sim = bundle.logits if config.logits_as_sim else similarity_matrix(bundle.hidden, protos)
    alpha = movement_attention(
        bundle.logits, eta, graph, config.leaky_slope, config.include_self, config.disable_homophily
    )
    t = 0.0 if config.disable_reldeg else config.t_exponent
    coeffs = movement_coefficients(alpha, graph, eta, t)
    move_const = coeffs @ np.sort(bundle.logits, axis=1)[:, ::-1]
    return _Precomp(
        a_hat=a_hat,
        prop_sim=a_hat @ sim,
        move_const=move_const,
        eta=eta,
        fit_idx=np.asarray(fit_idx, dtype=np.int64),
        selection_idx=np.asarray(selection_idx, dtype=np.int64),
        logits=bundle.logits,
        labels=bundle.labels,
    )


def _loss_fn(pre: _Precomp, config: SimCalibConfig):
    omega = _effective_omega(config)
    z_fit = nm.Tensor(pre.logits[pre.fit_idx], needs_grad=False, name="Zfit")
    y_fit = pre.labels[pre.fit_idx]
    head_avg = np.full((config.num_heads, 1), 1.0 / config.num_heads)

    def loss(leaves):
        mix = []
        if omega > 0.0:
            l1 = nm.relu(
                nm.matmul(nm.Tensor(pre.prop_sim, needs_grad=False, name="AS"), leaves["feat_w1"])
                + leaves["feat_b1"]
            )
            raw = nm.spmm(pre.a_hat, nm.matmul(l1, leaves["feat_w2"])) + leaves["feat_b2"]
            t_feat = nm.clamp_min(nm.softplus(raw), config.temp_floor)
            mix.append(omega * nm.softmax_rows(z_fit / nm.gather_rows(t_feat, pre.fit_idx)))
        if omega < 1.0:
            pre_heads = nm.matmul(
                nm.Tensor(pre.move_const, needs_grad=False, name="moveC"), _transpose(leaves["heads"])
            )
            head_mean = nm.matmul(pre_heads, head_avg)
            t_move = nm.clamp_min(nm.softplus(head_mean), config.temp_floor)
            mix.append((1.0 - omega) * nm.softmax_rows(z_fit / nm.gather_rows(t_move, pre.fit_idx)))
        probs = mix[0] if len(mix) == 1 else mix[0] + mix[1]
        return nm.mean_nll(probs, y_fit)

    return loss


def _transpose(x: nm.Tensor) -> nm.Tensor:
    def backward(g):
        return (g.T,)

    return nm.Tensor(x.value.T, (x,), backward, name="transpose")


def _forward_np(values: dict, pre: _Precomp, config: SimCalibConfig) -> np.ndarray:
    """Numpy forward over all nodes from raw parameter values."""
    omega = _effective_omega(config)
    parts = []
    if omega > 0.0:
        l1 = np.maximum(pre.prop_sim @ values["feat_w1"] + values["feat_b1"], 0.0)
        raw = pre.a_hat @ (l1 @ values["feat_w2"]) + values["feat_b2"]
        t_feat = np.maximum(nm.softplus_np(raw[:, 0]), config.temp_floor)
        parts.append(omega * nm.softmax_rows_np(pre.logits / t_feat[:, None]))
    if omega < 1.0:
        head_mean = (pre.move_const @ values["heads"].T).mean(axis=1)
        t_move = np.maximum(nm.softplus_np(head_mean), config.temp_floor)
        parts.append((1.0 - omega) * nm.softmax_rows_np(pre.logits / t_move[:, None]))
    return sum(parts)


def training_loss(bundle: NodeBundle, graph: Graph, config: SimCalibConfig, fit_idx=None, selection_idx=None):
    """Expose (loss_fn, params) exactly as used by training, for checks."""
    config.validate()
    fit_idx = bundle.masks["val"] if fit_idx is None else fit_idx
    selection_idx = bundle.masks["train"] if selection_idx is None else selection_idx
    protos = build_prototypes(
        bundle.hidden, bundle.labels, fit_idx, bundle.num_classes, config.ridge_scale
    )
    pre = _precompute(bundle, graph, config, protos, fit_idx, selection_idx)
    return _loss_fn(pre, config), _initial_params(config, bundle.num_classes), pre, protos


def train_simcalib(
    bundle: NodeBundle, graph: Graph, config: SimCalibConfig = SimCalibConfig(), fit_idx=None, selection_idx=None
) -> SimCalibModel:
    """Fit the calibrator by Adam on fit-set NLL, snapshot on selection NLL.

    Prototypes and covariance are computed once from the fit set and
    frozen.  The returned snapshot has the best selection-set NLL among
    epochs whose fit-set NLL does not exceed the initial one, so fitting
    never degrades the fit-set NLL.
    """
    loss_fn, params, pre, protos = training_loss(bundle, graph, config, fit_idx, selection_idx)

    def selection_nll(values: dict) -> float:
        probs = _forward_np(values, pre, config)
        return nll(probs, pre.labels, pre.selection_idx)

    state = nm.AdamState.for_params(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    init_fit = nm.evaluate_loss(loss_fn, params)
    best = params.snapshot()
    best_score = selection_nll(best)
    stale = 0
    for _ in range(config.max_epochs):
        nm.value_and_grad(loss_fn, params)
        nm.adam_step(params, state)
        fit = nm.evaluate_loss(loss_fn, params)
        if fit <= init_fit + 1e-9:
            score = selection_nll({k: params.value(k) for k in params.names()})
            if score < best_score - 1e-12:
                best_score = score
                best = params.snapshot()
                stale = 0
                continue
        stale += 1
        if stale >= config.patience:
            break
    return _model_from_values(best, config, protos)


@dataclass(frozen=True)
class GridSearchResult:
    model: SimCalibModel
    omega: float
    t_exponent: float
    selection_nll: float
    selection_ece: float
    candidates: list = field(default_factory=list)


def grid_search(
    bundle: NodeBundle, graph: Graph, config: SimCalibConfig = SimCalibConfig(), fit_idx=None, selection_idx=None
) -> GridSearchResult:
    """Train one model per (omega, t) pair; pick the best selection-set NLL.

    Ties break by lower selection-set ECE, then lexicographic (omega, t).
    Ablation flags collapse the corresponding grid axis.
    """
    sel = np.asarray(bundle.masks["train"] if selection_idx is None else selection_idx, dtype=np.int64)
    omega_grid = list(config.omega_grid)
    t_grid = list(config.t_grid)
    if config.disable_feat:
        omega_grid = [0.0]
    if config.disable_move:
        omega_grid = [1.0]
    if config.disable_reldeg:
        t_grid = [0.0]
    if not omega_grid or not t_grid:
        raise ValueError("grids must be nonempty")

    candidates = []
    for omega in omega_grid:
        for t in t_grid:
            cand_config = replace(config, omega=omega, t_exponent=t)
            model = train_simcalib(bundle, graph, cand_config, fit_idx, selection_idx)
            probs = model.apply(bundle, graph)
            sel_nll = nll(probs, bundle.labels, sel)
            conf, preds = confidences(probs[sel])
            correct = (preds == bundle.labels[sel]).astype(np.float64)
            sel_ece = ece(conf, correct, config.eval_bins)
            candidates.append(
                {"omega": omega, "t": t, "selection_nll": sel_nll, "selection_ece": sel_ece, "model": model}
            )
    ranked = min(candidates, key=lambda c: (c["selection_nll"], c["selection_ece"], c["omega"], c["t"]))
    table = [{k: c[k] for k in ("omega", "t", "selection_nll", "selection_ece")} for c in candidates]
    return GridSearchResult(
        model=ranked["model"],
        omega=ranked["omega"],
        t_exponent=ranked["t"],
        selection_nll=ranked["selection_nll"],
        selection_ece=ranked["selection_ece"],
        candidates=table,
    )


# ---------------------------------------------------------------------------
# serialization


def model_to_dict(model: SimCalibModel) -> dict:
    protos = model.prototypes
    return {
        "feat_w1": model.feat_w1.tolist(),
        "feat_b1": model.feat_b1.tolist(),
        "feat_w2": model.feat_w2.tolist(),
        "feat_b2": model.feat_b2.tolist(),
        "heads": model.heads.tolist(),
        "t_exponent": model.t_exponent,
        "omega": model.omega,
        "leaky_slope": model.leaky_slope,
        "temp_floor": model.temp_floor,
        "include_self": model.include_self,
        "disable_feat": model.disable_feat,
        "disable_move": model.disable_move,
        "disable_homophily": model.disable_homophily,
        "disable_reldeg": model.disable_reldeg,
        "logits_as_sim": model.logits_as_sim,
        "prototypes": {
            "means": protos.means.tolist(),
            "covariance": None if protos.covariance is None else protos.covariance.tolist(),
            "ridge": protos.ridge,
            "inverse": None if protos.inverse is None else protos.inverse.tolist(),
        },
    }


def model_from_dict(payload: dict) -> SimCalibModel:
    p = payload["prototypes"]
    protos = PrototypeSet(
        means=np.asarray(p["means"], dtype=np.float64),
        covariance=None if p["covariance"] is None else np.asarray(p["covariance"], dtype=np.float64),
        ridge=p["ridge"],
        inverse=None if p["inverse"] is None else np.asarray(p["inverse"], dtype=np.float64),
    )
    return SimCalibModel(
        feat_w1=np.asarray(payload["feat_w1"], dtype=np.float64),
        feat_b1=np.asarray(payload["feat_b1"], dtype=np.float64),
        feat_w2=np.asarray(payload["feat_w2"], dtype=np.float64),
        feat_b2=np.asarray(payload["feat_b2"], dtype=np.float64),
        heads=np.asarray(payload["heads"], dtype=np.float64),
        t_exponent=payload["t_exponent"],
        omega=payload["omega"],
        leaky_slope=payload["leaky_slope"],
        temp_floor=payload["temp_floor"],
        prototypes=protos,
        include_self=payload["include_self"],
        disable_feat=payload["disable_feat"],
        disable_move=payload["disable_move"],
        disable_homophily=payload["disable_homophily"],
        disable_reldeg=payload["disable_reldeg"],
        logits_as_sim=payload["logits_as_sim"],
    )

"""Monte Carlo lab for the two-node Gaussian model.

A world fixes a dimension d, a sample count n, label-symmetric means
mu_i and mu_j = a*mu_i + b with ||mu_i||^2 = d, and noise variance
sigma^2 = sqrt(d*n).  Labels are +-1 fair coins, features are
N(mu * y, sigma^2 I).  The lab compares the per-node mean estimator
against the joint two-node estimator: for each trial it computes both
estimators, their beta ratios (est . mu / ||est||^2), Monte Carlo
calibration errors, and the ordering events, then reports empirical
frequencies with Wilson intervals.

The calibration-error integrand |1/(e^(-2 beta v)+1) - 1/(e^(-2v)+1)|
treats the learned posterior as the unit-variance one; a sigma-aware
variant (exponents scaled by 1/sigma^2) is available behind a flag for
sensitivity analysis.  Since the integrand depends on a draw x only
through v = est . x, v is sampled directly from its exact law
N(y * est.mu, sigma^2 ||est||^2).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import rng

__all__ = [
    "GaussianWorld",
    "TheorySummary",
    "TrainingSet",
    "TrialResult",
    "beta_ratio",
    "calibration_gap",
    "ecm_accuracy",
    "estimator_joint",
    "estimator_joint_from_samples",
    "estimator_separate",
    "make_world",
    "mc_ece",
    "run_trials",
    "sample_training_set",
    "sweep",
    "wilson_interval",
    "write_sweep_csv",
]


@dataclass(frozen=True)
class GaussianWorld:
    """Two linearly related Gaussian-model nodes with shared noise scale."""

    d: int
    n: int
    a: float
    mu_i: np.ndarray
    b: np.ndarray
    sigma2: float

    @property
    def mu_j(self) -> np.ndarray:
        return self.a * self.mu_i + self.b

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma2))


def make_world(d: int, n: int, a: float, b_norm: float = 0.0, seed: int = 0) -> GaussianWorld:
    """Sample a world: mu_i uniform on the sphere of squared norm d,
    b uniform on the sphere of radius ``b_norm``, sigma^2 = sqrt(d*n)."""
    if d < 1 or n < 1:
        raise ValueError("d and n must be positive")
    gen = rng.generator(seed, "world", d, n)
    mu = gen.standard_normal(d)
    mu *= np.sqrt(d) / np.linalg.norm(mu)
    if b_norm > 0.0:
        b = gen.standard_normal(d)
        b *= b_norm / np.linalg.norm(b)
    else:
        b = np.zeros(d)
    return GaussianWorld(d=d, n=n, a=float(a), mu_i=mu, b=b, sigma2=float(np.sqrt(d * n)))


@dataclass(frozen=True)
class TrainingSet:
    """n labeled feature pairs for the two nodes."""

    x_i: np.ndarray  # n x d
    x_j: np.ndarray  # n x d
    y_i: np.ndarray  # n, in {-1, +1}
    y_j: np.ndarray


def sample_training_set(
    world: GaussianWorld, seed: int = 0, shared_labels: bool = True, sigma_override: float | None = None
) -> TrainingSet:
    """Draw the n training pairs; by default one label per graph sample."""
    gen = rng.generator(seed, "trainset")
    sigma = world.sigma if sigma_override is None else float(sigma_override)
    y_i = gen.integers(0, 2, size=world.n) * 2 - 1
    y_j = y_i if shared_labels else gen.integers(0, 2, size=world.n) * 2 - 1
    x_i = world.mu_i * y_i[:, None] + sigma * gen.standard_normal((world.n, world.d))
    x_j = world.mu_j * y_j[:, None] + sigma * gen.standard_normal((world.n, world.d))
    return TrainingSet(x_i, x_j, y_i, y_j)


def estimator_separate(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-node mean estimator: average of x^(k) * y^(k)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] < 1:
        raise ValueError("need at least one sample")
    return (x * y[:, None]).mean(axis=0)


def estimator_joint(mu_bar_i: np.ndarray, mu_bar_j: np.ndarray, a: float, b: np.ndarray) -> np.ndarray:
    """Joint estimator composed from the two per-node estimates:

    mu_hat_i = mu_bar_i/(1+a^2) + (a^2/(1+a^2)) * (mu_bar_j/a) - a*b/(1+a^2)
    """
    if a == 0.0:
        raise ValueError("joint estimator undefined for a = 0; use estimator_separate")
    denom = 1.0 + a * a
    return mu_bar_i / denom + (a * a / denom) * (np.asarray(mu_bar_j) / a) - a * np.asarray(b) / denom


def estimator_joint_from_samples(samples: TrainingSet, a: float, b: np.ndarray) -> np.ndarray:
    """Same estimator written as a per-sample sum (algebraically identical)."""
    if a == 0.0:
        raise ValueError("joint estimator undefined for a = 0; use estimator_separate")
    terms = samples.y_i[:, None] * samples.x_i + a * (samples.y_j[:, None] * samples.x_j - np.asarray(b))
    return terms.sum(axis=0) / (samples.x_i.shape[0] * (1.0 + a * a))


def beta_ratio(estimate: np.ndarray, mu: np.ndarray) -> float:
    """est . mu / ||est||^2 — the slope of the learned posterior's exponent."""
    estimate = np.asarray(estimate, dtype=np.float64)
    sq = float(estimate @ estimate)
    if sq == 0.0:
        raise ValueError("zero estimate has no beta ratio")
    return float(estimate @ np.asarray(mu, dtype=np.float64)) / sq


def calibration_gap(beta: float, v, sigma2: float | None = None) -> np.ndarray:
    """|sigmoid(2 beta v) - sigmoid(2 v)|, optionally with 1/sigma^2 scaling."""
    v = np.asarray(v, dtype=np.float64)
    scale = 2.0 if sigma2 is None else 2.0 / sigma2
    return np.abs(expit(beta * scale * v) - expit(scale * v))


def _projection_samples(
    estimate: np.ndarray, world: GaussianWorld, num_samples: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (y, v) with v = estimate . x, x ~ N(mu_i * y, sigma^2 I) exactly."""
    estimate = np.asarray(estimate, dtype=np.float64)
    gen = rng.generator(seed, "mc")
    y = gen.integers(0, 2, size=num_samples) * 2 - 1
    center = float(estimate @ world.mu_i)
    spread = world.sigma * float(np.linalg.norm(estimate))
    v = y * center + spread * gen.standard_normal(num_samples)
    return y, v


def mc_ece(
    estimate: np.ndarray, world: GaussianWorld, num_samples: int, seed: int = 0, sigma_aware: bool = False
) -> float:
    """Monte Carlo calibration error of the model using ``estimate``.

    Mean over fresh draws of the gap between the learned posterior
    sigmoid(2 beta v) and the clean posterior sigmoid(2 v) at v = est . x.
    Exactly zero when estimate equals mu_i (beta = 1).
    """
    if num_samples < 1:
        raise ValueError("need at least one sample")
    beta = beta_ratio(estimate, world.mu_i)
    _, v = _projection_samples(estimate, world, num_samples, seed)
    return float(calibration_gap(beta, v, world.sigma2 if sigma_aware else None).mean())


def ecm_accuracy(estimate: np.ndarray, world: GaussianWorld, num_samples: int, seed: int = 0) -> float:
    """Accuracy of predicting y by the sign of est . x (ties count as +1)."""
    if num_samples < 1:
        raise ValueError("need at least one sample")
    y, v = _projection_samples(estimate, world, num_samples, seed)
    pred = np.where(v >= 0.0, 1, -1)
    return float((pred == y).mean())


# ---------------------------------------------------------------------------
# trials


@dataclass(frozen=True)
class TrialResult:
    beta_bar: float
    beta_hat: float
    ece_bar: float
    ece_hat: float
    hat_le_one: bool
    bar_ge_half: bool
    hat_ge_bar: bool
    ece_ordered: bool

    @classmethod
    def from_values(cls, beta_bar, beta_hat, ece_bar, ece_hat) -> "TrialResult":
        return cls(
            beta_bar=beta_bar,
            beta_hat=beta_hat,
            ece_bar=ece_bar,
            ece_hat=ece_hat,
            hat_le_one=beta_hat <= 1.0,
            bar_ge_half=beta_bar >= 0.5,
            hat_ge_bar=beta_hat >= beta_bar,
            ece_ordered=ece_hat <= ece_bar,
        )

    @property
    def chain_holds(self) -> bool:
        """The full ordering event 1 >= beta_hat >= beta_bar >= 1/2."""
        return self.hat_le_one and self.hat_ge_bar and self.bar_ge_half


def wilson_interval(hits: int, total: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson 95% score interval for a binomial frequency."""
    if total <= 0:
        raise ValueError("total must be positive")
    p = hits / total
    denom = 1.0 + z * z / total
    center = (p + z * z / (2 * total)) / denom
    half = z * np.sqrt(p * (1 - p) / total + z * z / (4 * total * total)) / denom
    return center - half, center + half


@dataclass(frozen=True)
class TheorySummary:
    d: int
    n: int
    a: float
    b_norm: float
    trials: int
    freq_hat_le_one: float
    freq_bar_ge_half: float
    freq_hat_ge_bar: float
    freq_order: float  # full chain 1 >= beta_hat >= beta_bar >= 1/2
    freq_ece: float  # ece_hat <= ece_bar
    wilson: dict
    lemma3_condition_met: bool  # sqrt(d/n) >= n, flagged but not asserted

    def as_row(self) -> dict:
        lo, hi = self.wilson["ece"]
        return {
            "d": self.d,
            "n": self.n,
            "a": self.a,
            "b_norm": self.b_norm,
            "trials": self.trials,
            "freq_order": self.freq_order,
            "freq_ece": self.freq_ece,
            "wilson_lo": lo,
            "wilson_hi": hi,
        }


def run_trials(
    world: GaussianWorld,
    num_trials: int,
    mc_samples: int = 20000,
    seed: int = 0,
    shared_labels: bool = True,
    sigma_aware: bool = False,
) -> tuple[list[TrialResult], TheorySummary]:
    """Independent trials of (sample, estimate both ways, compare).

    Per-trial streams derive from (seed, trial index), so results are
    identical no matter how trials are scheduled.
    """
    if num_trials < 1 or mc_samples < 1:
        raise ValueError("counts must be positive")
    results = []
    for k in range(num_trials):
        samples = sample_training_set(world, rng.derive_seed(seed, "trial", k, "train"), shared_labels)
        mu_bar = estimator_separate(samples.x_i, samples.y_i)
        mu_bar_j = estimator_separate(samples.x_j, samples.y_j)
        mu_hat = estimator_joint(mu_bar, mu_bar_j, world.a, world.b)
        ece_bar = mc_ece(mu_bar, world, mc_samples, rng.derive_seed(seed, "trial", k, "mc", 0), sigma_aware)
        ece_hat = mc_ece(mu_hat, world, mc_samples, rng.derive_seed(seed, "trial", k, "mc", 1), sigma_aware)
        results.append(
            TrialResult.from_values(
                beta_bar=beta_ratio(mu_bar, world.mu_i),
                beta_hat=beta_ratio(mu_hat, world.mu_i),
                ece_bar=ece_bar,
                ece_hat=ece_hat,
            )
        )
    counts = {
        "hat_le_one": sum(r.hat_le_one for r in results),
        "bar_ge_half": sum(r.bar_ge_half for r in results),
        "hat_ge_bar": sum(r.hat_ge_bar for r in results),
        "order": sum(r.chain_holds for r in results),
        "ece": sum(r.ece_ordered for r in results),
    }
    summary = TheorySummary(
        d=world.d,
        n=world.n,
        a=world.a,
        b_norm=float(np.linalg.norm(world.b)),
        trials=num_trials,
        freq_hat_le_one=counts["hat_le_one"] / num_trials,
        freq_bar_ge_half=counts["bar_ge_half"] / num_trials,
        freq_hat_ge_bar=counts["hat_ge_bar"] / num_trials,
        freq_order=counts["order"] / num_trials,
        freq_ece=counts["ece"] / num_trials,
        wilson={name: wilson_interval(hits, num_trials) for name, hits in counts.items()},
        lemma3_condition_met=bool(np.sqrt(world.d / world.n) >= world.n),
    )
    return results, summary


def sweep(
    points,
    num_trials: int,
    mc_samples: int = 20000,
    seed: int = 0,
    shared_labels: bool = True,
    sigma_aware: bool = False,
) -> list[TheorySummary]:
    """run_trials over a grid of (d, n, a, b_norm) points."""
    points = list(points)
    if not points:
        raise ValueError("grid must be nonempty")
    summaries = []
    for i, point in enumerate(points):
        d, n, a = int(point["d"]), int(point["n"]), float(point["a"])
        b_norm = float(point.get("b_norm", 0.0))
        world = make_world(d, n, a, b_norm, seed=rng.derive_seed(seed, "point", i, "world"))
        _, summary = run_trials(
            world, num_trials, mc_samples, rng.derive_seed(seed, "point", i), shared_labels, sigma_aware
        )
        summaries.append(summary)
    return summaries


def write_sweep_csv(path, summaries) -> None:
    fields = ["d", "n", "a", "b_norm", "trials", "freq_order", "freq_ece", "wilson_lo", "wilson_hi"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for s in summaries:
            row = s.as_row()
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})

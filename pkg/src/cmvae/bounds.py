"""Estimators of the log joint marginal likelihood.

Three interchangeable approximations: the single/multi-sample ELBO, the
importance-weighted K-sample lower bound (IWAE), and a chi-square-style
upper-bound estimator (CUBO) computed as half the log of the mean squared
importance weight.  The CUBO form here keeps the expectation outside the
log of the sample average, which is a biased estimate of the true
chi-square bound; the bias vanishes as K grows.

All estimators return per-item values; batch reductions belong to the
objective layer.  Per-item sampling noise is keyed on item content, so
estimates are deterministic under a fixed seed and invariant to batch
permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .distributions import DiagonalGaussian, standard_normal_log_prob
from .seeding import per_row_normal

ESTIMATOR_KINDS = ("elbo", "iwae", "cubo")

# Joint-density evaluation counter (rows scored since last reset); used to
# verify the O(N) cost structure of the many-modality objective.
_joint_rows_scored = 0


def reset_joint_eval_count() -> None:
    global _joint_rows_scored
    _joint_rows_scored = 0


def joint_eval_count() -> int:
    return _joint_rows_scored


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str
    num_samples: int = 30

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"estimator kind must be one of {ESTIMATOR_KINDS}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


def joint_log_weights(model, obs_by_modality: dict, num_samples: int, seed: int) -> Tensor:
    """Log importance weights log p(z, obs) - log q(z | obs), shape (B, K).

    Modalities are folded in sorted-name order so the result is bit-stable
    under relabeling of the modality list.
    """
    global _joint_rows_scored
    z, log_q = model.joint_posterior_samples(obs_by_modality, num_samples, seed)
    _joint_rows_scored += z.shape[0]
    log_p = standard_normal_log_prob(z)
    liks = model.decode_all(z)
    for name in sorted(liks):
        obs = np.atleast_2d(np.asarray(obs_by_modality[name], dtype=np.float64))
        log_p = log_p + liks[name].log_prob(obs[:, None, :])
    return log_p - log_q


def bound_from_log_weights(log_w: Tensor, kind: str) -> Tensor:
    """Reduce (B, K) log weights to a per-item bound estimate (B,)."""
    k = log_w.shape[-1]
    if kind == "elbo":
        return log_w.mean(axis=-1)
    if kind == "iwae":
        return log_w.logsumexp(axis=-1) - float(np.log(k))
    if kind == "cubo":
        return 0.5 * ((2.0 * log_w).logsumexp(axis=-1) - float(np.log(k)))
    raise ValueError(f"unknown estimator kind {kind!r}")


def joint_bound(model, obs_by_modality: dict, spec: EstimatorSpec, seed: int) -> Tensor:
    return bound_from_log_weights(
        joint_log_weights(model, obs_by_modality, spec.num_samples, seed), spec.kind)


def _pair_obs(model, x, y) -> dict:
    names = [m.name for m in model.modalities]
    if len(names) != 2:
        raise ValueError("x/y form requires a two-modality model")
    return {names[0]: x, names[1]: y}


def elbo(model, x, y, num_samples: int, seed: int) -> Tensor:
    """Per-item multi-sample ELBO, (1/S) sum_s [log p(z_s, x, y) - log q(z_s | x, y)]."""
    return joint_bound(model, _pair_obs(model, x, y), EstimatorSpec("elbo", num_samples), seed)


def iwae(model, x, y, num_samples: int, seed: int) -> Tensor:
    """Per-item K-sample importance-weighted bound, logsumexp_k(log w_k) - log K."""
    return joint_bound(model, _pair_obs(model, x, y), EstimatorSpec("iwae", num_samples), seed)


def cubo(model, x, y, num_samples: int, seed: int) -> Tensor:
    """Per-item upper-bound estimate, (logsumexp_k(2 log w_k) - log K) / 2."""
    return joint_bound(model, _pair_obs(model, x, y), EstimatorSpec("cubo", num_samples), seed)


def unimodal_marginal(model, name: str, obs, num_samples: int, seed: int) -> Tensor:
    """IWAE estimate of one modality's marginal log-likelihood.

    Uses the unimodal encoder as the proposal and only that modality's
    decoder likelihood in the weights.
    """
    model.modality(name)  # raises UnknownModalityError for bad names
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    q = model.encode_unimodal(name, obs)
    noise = per_row_normal(seed, f"unimodal_marginal.{name}", [(r,) for r in obs],
                           (num_samples, model.latent_dim))
    mean = q.mean.reshape(q.mean.shape[0], 1, q.mean.shape[1])
    log_var = q.log_var.reshape(q.log_var.shape[0], 1, q.log_var.shape[1])
    z = mean + (0.5 * log_var).exp() * Tensor.const(noise)
    log_q = DiagonalGaussian(mean=mean, log_var=log_var).log_prob(z)
    log_w = standard_normal_log_prob(z) + model.decode(name, z).log_prob(obs[:, None, :]) - log_q
    return bound_from_log_weights(log_w, "iwae")

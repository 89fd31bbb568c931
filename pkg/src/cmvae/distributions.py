"""Diagonal Gaussian and factorized Bernoulli families.

Both are thin dataclasses over Tensors so that log-densities and
reparameterized samples stay differentiable.  Parameters may carry a
leading batch axis; log-densities reduce over the trailing event axis
only.  All functions are pure and safe to call from any thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatchError, Tensor, _unbroadcast

LOG_2PI = float(np.log(2.0 * np.pi))
LOGIT_CLAMP = 15.0  # keeps Bernoulli probabilities strictly inside (0, 1)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor.const(x)


@dataclass(frozen=True)
class DiagonalGaussian:
    """Mean / log-variance parameterization of an axis-aligned Gaussian."""

    mean: Tensor
    log_var: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def log_prob(self, value) -> Tensor:
        return gaussian_log_prob(self, value)

    def rsample(self, noise) -> Tensor:
        return rsample(self, noise)


@dataclass(frozen=True)
class FactorBernoulli:
    """Independent Bernoulli per coordinate, parameterized by logits."""

    logits: Tensor

    @property
    def dim(self) -> int:
        return self.logits.shape[-1]

    @property
    def mean(self) -> Tensor:
        return self.logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).sigmoid()

    def log_prob(self, value) -> Tensor:
        """Sum of per-coordinate Bernoulli log-likelihoods.

        Accepts targets in [0, 1] (cross-entropy form).  Logits are clamped
        to +-15 first, which bounds both the density and its gradient.
        Fused single-op evaluation; targets must be constants.
        """
        v = _as_tensor(value)
        if v.requires_grad:
            raise ValueError("bernoulli log_prob expects constant targets")
        if v.shape[-1] != self.dim:
            raise ShapeMismatchError("bernoulli_log_prob", v.shape, self.logits.shape)
        raw = self.logits.value
        lo = np.clip(raw, -LOGIT_CLAMP, LOGIT_CLAMP)
        vv = v.value
        val = (vv * lo - np.logaddexp(0.0, lo)).sum(axis=-1)
        logits = self.logits

        def vjp(g):
            sig = 1.0 / (1.0 + np.exp(-lo))
            inside = (np.abs(raw) < LOGIT_CLAMP).astype(np.float64)
            return _unbroadcast(g[..., None] * (vv - sig) * inside, raw.shape)

        return Tensor(val, parents=((logits, vjp),))


def gaussian_log_prob(d: DiagonalGaussian, value) -> Tensor:
    """log N(value; mean, diag exp(log_var)), reduced over the event axis.

    Fused into a single graph node with analytic adjoints for the value,
    the mean, and the log-variance.
    """
    v = _as_tensor(value)
    if v.shape[-1] != d.mean.shape[-1]:
        raise ShapeMismatchError("gaussian_log_prob", v.shape, d.mean.shape)
    mean, log_var = d.mean, d.log_var
    try:
        diff = v.value - mean.value
    except ValueError:
        raise ShapeMismatchError("gaussian_log_prob", v.shape, mean.shape) from None
    inv_var = np.exp(-log_var.value)
    dp = diff * inv_var
    val = (-0.5 * (LOG_2PI + log_var.value) - 0.5 * diff * dp).sum(axis=-1)

    def vjp_value(g):
        return _unbroadcast(-g[..., None] * dp, v.value.shape)

    def vjp_mean(g):
        return _unbroadcast(g[..., None] * dp, mean.value.shape)

    def vjp_log_var(g):
        return _unbroadcast(g[..., None] * (-0.5 + 0.5 * diff * dp), log_var.value.shape)

    return Tensor(val, parents=((v, vjp_value), (mean, vjp_mean), (log_var, vjp_log_var)))


def standard_normal_log_prob(value) -> Tensor:
    v = _as_tensor(value)
    val = (-0.5 * (LOG_2PI + v.value * v.value)).sum(axis=-1)

    def vjp(g):
        return -g[..., None] * v.value

    return Tensor(val, parents=((v, vjp),))


def rsample(d: DiagonalGaussian, noise) -> Tensor:
    """Reparameterized draw mean + exp(log_var / 2) * noise.

    The standard-normal noise is supplied by the caller so that sampling
    stays deterministic under the caller's seed discipline.
    """
    eps = _as_tensor(noise)
    return d.mean + (0.5 * d.log_var).exp() * eps


def gaussian_product(components: list[DiagonalGaussian],
                     include_standard_prior: bool = False) -> DiagonalGaussian:
    """Precision-weighted product of diagonal Gaussians.

    lambda = sum_i lambda_i (+1 for the standard prior when requested),
    mean = sum_i lambda_i mean_i / lambda.  Empty input is only legal with
    the prior included, in which case the result is the prior itself.
    """
    if not components and not include_standard_prior:
        raise ValueError("gaussian_product of no components and no prior")
    precisions = [(-c.log_var).exp() for c in components]
    total = precisions[0] if precisions else None
    for lam in precisions[1:]:
        total = total + lam
    if include_standard_prior:
        total = total + 1.0 if total is not None else Tensor.const(np.ones(1))
    weighted = None
    for c, lam in zip(components, precisions):
        term = c.mean * lam
        weighted = term if weighted is None else weighted + term
    mean = weighted / total if weighted is not None else total * 0.0
    return DiagonalGaussian(mean=mean, log_var=-total.log())

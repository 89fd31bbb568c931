"""Contrastive training objective over related/unrelated multimodal pairs.

The loss pushes the estimated joint likelihood of a related pair above the
likelihoods of pairs formed with within-batch negatives, with the positive
term upweighted by gamma (> 1) to keep the likelihood-minimizing pull of
the negative term from collapsing the generative model.  gamma = +inf is
the baseline sentinel: plain ELBO training, no negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .bounds import EstimatorSpec, joint_bound
from .seeding import derive_rng, tag

VARIANTS = ("baseline", "cI", "cC")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Loss weighting and estimator choices.

    variant "cI" scores negatives with IWAE, "cC" with CUBO; both keep IWAE
    for the positive term.  "baseline" trains on the plain ELBO.
    """

    variant: str = "cI"
    gamma: float = 2.0
    num_negatives: int = 5
    term1: EstimatorSpec = field(default_factory=lambda: EstimatorSpec("iwae", 30))
    term2: EstimatorSpec | None = field(default_factory=lambda: EstimatorSpec("iwae", 30))

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.variant == "baseline":
            if not math.isinf(self.gamma):
                raise ValueError("baseline mode uses the gamma = +inf sentinel")
        else:
            if not self.gamma >= 1.0:
                raise ValueError("gamma must be >= 1")
            if self.num_negatives < 1:
                raise ValueError("num_negatives must be >= 1")
            expected = {"cI": "iwae", "cC": "cubo"}[self.variant]
            if self.term1.kind != "iwae":
                raise ValueError(f"{self.variant} scores the positive term with iwae")
            if self.term2 is None or self.term2.kind != expected:
                raise ValueError(f"{self.variant} scores negatives with {expected}")

    @staticmethod
    def for_variant(variant: str, gamma: float = 2.0, num_negatives: int = 5,
                    num_samples: int = 30) -> "ObjectiveConfig":
        if variant == "baseline":
            return ObjectiveConfig(variant="baseline", gamma=math.inf,
                                   num_negatives=num_negatives,
                                   term1=EstimatorSpec("elbo", num_samples), term2=None)
        term2_kind = {"cI": "iwae", "cC": "cubo"}[variant]
        return ObjectiveConfig(variant=variant, gamma=gamma, num_negatives=num_negatives,
                               term1=EstimatorSpec("iwae", num_samples),
                               term2=EstimatorSpec(term2_kind, num_samples))


@dataclass(frozen=True)
class NegativeSet:
    """Per-anchor replacement indices, one (B, N) block per non-anchor modality.

    Indices address the surrounding batch; an anchor's own partner index
    never appears among its negatives.
    """

    indices: dict[str, np.ndarray]

    @property
    def num_negatives(self) -> int:
        return next(iter(self.indices.values())).shape[1]


def draw_negatives(batch_size: int, modality_names: list[str], num_negatives: int,
                   seed: int) -> NegativeSet:
    """Uniform without-replacement draws of other batch items, per anchor."""
    if batch_size < num_negatives + 1:
        raise ValueError(
            f"batch of {batch_size} cannot supply {num_negatives} negatives per anchor")
    indices = {}
    for name in sorted(modality_names):
        rng = derive_rng(seed, tag(f"negatives.{name}"))
        block = np.empty((batch_size, num_negatives), dtype=np.int64)
        for i in range(batch_size):
            pool = np.delete(np.arange(batch_size), i)
            block[i] = rng.choice(pool, size=num_negatives, replace=False)
        indices[name] = block
    return NegativeSet(indices=indices)


def contrastive_asymmetric(model, x: np.ndarray, y: np.ndarray, negatives_y: np.ndarray,
                           cfg: ObjectiveConfig, seed: int) -> float:
    """One-direction contrastive value for a single anchor pair.

    -Lhat(x, y) + logsumexp_i Lhat(x, y'_i) with the term-appropriate
    estimators; negatives_y has shape (N, dim_y).
    """
    names = [m.name for m in model.modalities]
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    negs = np.asarray(negatives_y, dtype=np.float64)
    if negs.shape[0] != cfg.num_negatives:
        raise ValueError(f"expected {cfg.num_negatives} negatives, got {negs.shape[0]}")
    pos = joint_bound(model, {names[0]: x, names[1]: y}, cfg.term1, seed)
    neg = joint_bound(model, {names[0]: np.repeat(x, negs.shape[0], axis=0), names[1]: negs},
                      cfg.term2, seed)
    return float((neg.logsumexp(axis=0) - pos.sum()).value)


def final_objective(model, batch: dict[str, np.ndarray], cfg: ObjectiveConfig,
                    seed: int, negatives: NegativeSet | None = None):
    """Batch-mean training loss for a two-modality model.

    Returns (loss, term1, term2): the differentiable scalar loss, the mean
    positive-pair estimate, and the mean symmetrized negative log-sum-exp.
    In baseline mode the loss is -mean ELBO and term2 is NaN.
    """
    names = [m.name for m in model.modalities]
    if len(names) != 2:
        raise ValueError("final_objective covers two modalities; see multimodal_objective")
    obs = {n: np.atleast_2d(np.asarray(batch[n], dtype=np.float64)) for n in names}
    batch_size = obs[names[0]].shape[0]

    pos = joint_bound(model, obs, cfg.term1, seed)
    if cfg.variant == "baseline":
        loss = -pos.mean()
        return loss, float(pos.mean().value), math.nan

    n_neg = cfg.num_negatives
    if batch_size <= n_neg:
        raise ValueError(f"batch size {batch_size} must exceed num_negatives {n_neg}")
    if negatives is None:
        negatives = draw_negatives(batch_size, names, n_neg, seed)

    # One direction per modality: replace that modality's observation with
    # each of the anchor's negatives, keep the other modality fixed.
    lse_by_direction = []
    for replaced in names:
        kept = names[0] if replaced == names[1] else names[1]
        idx = negatives.indices[replaced]
        rows = {
            kept: np.repeat(obs[kept], n_neg, axis=0),
            replaced: obs[replaced][idx.reshape(-1)],
        }
        est = joint_bound(model, rows, cfg.term2, seed)
        lse_by_direction.append(est.reshape(batch_size, n_neg).logsumexp(axis=1))

    contrast = 0.5 * (lse_by_direction[0] + lse_by_direction[1])
    loss = (-cfg.gamma * pos + contrast).mean()
    return loss, float(pos.mean().value), float(contrast.mean().value)


def draw_index_matrix(num_modalities: int, num_negatives: int, pool_sizes, seed: int) -> np.ndarray:
    """Random (M, N) index matrix selecting negative tuples, one column per tuple."""
    sizes = np.broadcast_to(np.asarray(pool_sizes, dtype=np.int64), (num_modalities,))
    rng = derive_rng(seed, tag("index_matrix"))
    return np.stack([rng.integers(0, sizes[m], size=num_negatives)
                     for m in range(num_modalities)])


def multimodal_objective(model, batch: dict[str, np.ndarray], index_matrix: np.ndarray,
                         cfg: ObjectiveConfig, seed: int) -> Tensor:
    """Simplified many-modality loss with O(N) joint evaluations per anchor.

    Negative tuples are assembled by indexing each modality's pool with one
    column of the (M, N) index matrix; every anchor is scored against the
    same N tuples plus its own positive tuple, so the joint estimator runs
    exactly N + 1 times per anchor regardless of the modality count.
    """
    names = [m.name for m in model.modalities]
    obs = {n: np.atleast_2d(np.asarray(batch[n], dtype=np.float64)) for n in names}
    batch_size = obs[names[0]].shape[0]
    J = np.asarray(index_matrix)
    if J.shape != (len(names), cfg.num_negatives):
        raise ValueError(f"index matrix must be ({len(names)}, {cfg.num_negatives}), got {J.shape}")
    for m, name in enumerate(names):
        if J[m].min() < 0 or J[m].max() >= obs[name].shape[0]:
            raise IndexError(f"index matrix out of bounds for modality {name!r}")

    pos = joint_bound(model, obs, cfg.term1, seed)
    if cfg.variant == "baseline":
        return -pos.mean()

    n_neg = cfg.num_negatives
    rows = {name: np.repeat(obs[name][J[m]][None, :, :], batch_size, axis=0).reshape(
        batch_size * n_neg, -1) for m, name in enumerate(names)}
    est = joint_bound(model, rows, cfg.term2, seed)
    contrast = est.reshape(batch_size, n_neg).logsumexp(axis=1)
    return (-cfg.gamma * pos + contrast).mean()

"""Synthetic multimodal data with a known shared factor.

Generation model per modality m:

    u = S_m . onehot(c) + P_m . s_p + noise,   noise ~ N(0, noise_scale^2)
    obs = clamp01(sigmoid(u))   for bernoulli modalities
    obs = u                     for gaussian modalities

where c is the class (the factor shared across modalities), s_p ~ N(0, I)
are private factors, and the mixing maps (S_m, P_m) are fixed by the
dataset seed.  Two items from different modalities are *related* (r = 1)
exactly when their classes match.  Class labels ride along for oracle
evaluation only; nothing downstream may predict from them.

Generation, pairing and subsetting are pure functions of (spec, seed).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .seeding import derive_rng, tag

DATASET_MAGIC = b"CMDS"
DATASET_VERSION = 1


class DegenerateMapError(RuntimeError):
    """Mixing map stayed rank-deficient on the shared-factor block."""


@dataclass(frozen=True)
class FactorSpec:
    num_classes: int = 5
    modality_names: tuple = ("m1", "m2")
    obs_dims: tuple = (16, 16)
    private_dims: tuple = (3, 3)
    likelihoods: tuple = ("gaussian", "gaussian")
    noise_scale: float = 0.1
    map_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        n = len(self.modality_names)
        if not (len(self.obs_dims) == len(self.private_dims) == len(self.likelihoods) == n):
            raise ValueError("per-modality fields must have equal lengths")

    def modality_index(self, name: str) -> int:
        return self.modality_names.index(name)


def mixing_maps(spec: FactorSpec) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-modality (shared, private) mixing maps, full rank on the shared block.

    Deterministic in spec.map_seed; retries with successor seeds on rank
    deficiency and gives up after 5 attempts.
    """
    maps = {}
    for m, name in enumerate(spec.modality_names):
        d, p = spec.obs_dims[m], spec.private_dims[m]
        for attempt in range(5):
            rng = derive_rng(spec.map_seed + attempt, tag(f"mixing.{name}"))
            shared = rng.standard_normal((d, spec.num_classes))
            private = rng.standard_normal((d, p)) if p else np.zeros((d, 0))
            if np.linalg.matrix_rank(shared) == min(d, spec.num_classes) == spec.num_classes:
                maps[name] = (shared, private)
                break
        else:
            raise DegenerateMapError(
                f"no full-rank shared map for modality {name!r} in 5 attempts "
                f"(obs_dim {d} < num_classes {spec.num_classes}?)")
    return maps


@dataclass(frozen=True)
class UnimodalData:
    modality: str
    observations: np.ndarray  # (n, obs_dim)
    labels: np.ndarray        # (n,) int class ids


def generate_unimodal(spec: FactorSpec, n: int, modality: str, seed: int) -> UnimodalData:
    """Draw n observations with balanced classes; bit-identical under one seed."""
    if n < spec.num_classes:
        raise ValueError(f"need at least {spec.num_classes} items for balanced classes")
    m = spec.modality_index(modality)
    shared, private = mixing_maps(spec)[modality]
    rng = derive_rng(seed, tag(f"generate.{modality}"))
    labels = rng.permutation(np.arange(n) % spec.num_classes)
    onehot = np.eye(spec.num_classes)[labels]
    s_p = rng.standard_normal((n, spec.private_dims[m]))
    noise = spec.noise_scale * rng.standard_normal((n, spec.obs_dims[m]))
    u = onehot @ shared.T + s_p @ private.T + noise
    if spec.likelihoods[m] == "bernoulli":
        obs = np.clip(1.0 / (1.0 + np.exp(-u)), 0.0, 1.0)
    else:
        obs = u
    return UnimodalData(modality=modality, observations=obs, labels=labels)


@dataclass(frozen=True)
class PairedDataset:
    """Pools per modality plus an index list of pairs with relatedness flags."""

    spec: FactorSpec
    observations: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    pairs: np.ndarray        # (P, M) indices into the per-modality pools
    related: np.ndarray      # (P,) uint8, 1 iff all classes in the pair match
    pairs_per_instance: int = 1
    pair_seed: int = 0

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @property
    def modality_names(self) -> tuple:
        return self.spec.modality_names

    def pair_observations(self, rows=None) -> dict[str, np.ndarray]:
        """Observation arrays aligned with (a slice of) the pair list."""
        sel = self.pairs if rows is None else self.pairs[rows]
        return {name: self.observations[name][sel[:, m]]
                for m, name in enumerate(self.spec.modality_names)}

    def pair_labels(self, rows=None) -> dict[str, np.ndarray]:
        sel = self.pairs if rows is None else self.pairs[rows]
        return {name: self.labels[name][sel[:, m]]
                for m, name in enumerate(self.spec.modality_names)}


def _relatedness(parts: list[UnimodalData], pairs: np.ndarray) -> np.ndarray:
    first = parts[0].labels[pairs[:, 0]]
    match = np.ones(len(pairs), dtype=bool)
    for m in range(1, len(parts)):
        match &= parts[m].labels[pairs[:, m]] == first
    return match.astype(np.uint8)


def _dataset(spec, parts, pairs, ppi, pair_seed) -> PairedDataset:
    return PairedDataset(
        spec=spec,
        observations={p.modality: p.observations for p in parts},
        labels={p.modality: p.labels for p in parts},
        pairs=pairs,
        related=_relatedness(parts, pairs),
        pairs_per_instance=ppi,
        pair_seed=pair_seed,
    )


def pair_related(spec: FactorSpec, x: UnimodalData, y: UnimodalData,
                 pairs_per_instance: int = 30, seed: int = 0) -> PairedDataset:
    """Pair every first-modality item with same-class partners (all r = 1).

    Partners are drawn without replacement from the class pool, falling
    back to replacement when the pool is smaller than requested.
    """
    rng = derive_rng(seed, tag("pair_related"))
    x_classes = set(np.unique(x.labels).tolist())
    by_class = {c: np.flatnonzero(y.labels == c) for c in x_classes}
    for c, pool in by_class.items():
        if pool.size == 0:
            raise ValueError(f"class {c} present in {x.modality!r} but absent in {y.modality!r}")
    pairs = np.empty((len(x.labels) * pairs_per_instance, 2), dtype=np.int64)
    row = 0
    for i, c in enumerate(x.labels):
        pool = by_class[int(c)]
        partners = rng.choice(pool, size=pairs_per_instance, replace=pool.size < pairs_per_instance)
        pairs[row:row + pairs_per_instance, 0] = i
        pairs[row:row + pairs_per_instance, 1] = partners
        row += pairs_per_instance
    return _dataset(spec, [x, y], pairs, pairs_per_instance, seed)


def pair_random(spec: FactorSpec, x: UnimodalData, y: UnimodalData, seed: int = 0) -> PairedDataset:
    """Uniform random pairing; relatedness recorded from the true labels."""
    rng = derive_rng(seed, tag("pair_random"))
    partners = rng.integers(0, len(y.labels), size=len(x.labels))
    pairs = np.stack([np.arange(len(x.labels)), partners], axis=1)
    return _dataset(spec, [x, y], pairs, 1, seed)


def subset(ds: PairedDataset, percent: float, seed: int = 0) -> PairedDataset:
    """Class-stratified subsample of each unimodal pool, then re-pair related.

    Taking the pools first (rather than subsampling pairs) preserves the
    requisite amount of related structure at every fraction; 100 percent
    reproduces the original pairing.
    """
    if not 0.0 < percent <= 100.0:
        raise ValueError("percent must lie in (0, 100]")
    names = ds.spec.modality_names
    kept_parts = []
    for name in names:
        labels = ds.labels[name]
        keep_n = int(round(len(labels) * percent / 100.0))
        if keep_n < ds.spec.num_classes:
            raise ValueError(f"subset of {keep_n} items cannot cover {ds.spec.num_classes} classes")
        rng = derive_rng(seed, tag(f"subset.{name}"))
        chosen = _stratified_choice(labels, keep_n, rng)
        kept_parts.append(UnimodalData(modality=name,
                                       observations=ds.observations[name][chosen],
                                       labels=labels[chosen]))
    return pair_related(ds.spec, kept_parts[0], kept_parts[1],
                        pairs_per_instance=ds.pairs_per_instance, seed=ds.pair_seed)


def _stratified_choice(labels: np.ndarray, keep_n: int, rng) -> np.ndarray:
    """Pick keep_n indices with per-class counts balanced to within one item."""
    if keep_n >= len(labels):
        return np.arange(len(labels))
    classes = np.unique(labels)
    base, extra = divmod(keep_n, len(classes))
    counts = {int(c): base + (1 if i < extra else 0) for i, c in enumerate(rng.permutation(classes))}
    chosen = []
    for c in classes:
        pool = np.flatnonzero(labels == c)
        take = min(counts[int(c)], pool.size)
        chosen.append(rng.choice(pool, size=take, replace=False))
    return np.sort(np.concatenate(chosen))


# -- persistence ----------------------------------------------------------------

def save_dataset(ds: PairedDataset, path: str) -> None:
    """Flat binary export: CMDS magic, version, spec header, then the arrays."""
    names = ds.spec.modality_names
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIdqI", DATASET_VERSION, ds.spec.num_classes, len(names),
                             ds.spec.noise_scale, ds.spec.map_seed, len(ds)))
        fh.write(struct.pack("<Iq", ds.pairs_per_instance, ds.pair_seed))
        for m, name in enumerate(names):
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<III", ds.spec.obs_dims[m], ds.spec.private_dims[m],
                                 0 if ds.spec.likelihoods[m] == "bernoulli" else 1))
            fh.write(struct.pack("<I", len(ds.labels[name])))
        for name in names:
            fh.write(ds.observations[name].astype("<f8").tobytes())
            fh.write(ds.labels[name].astype("<i8").tobytes())
        fh.write(ds.pairs.astype("<i8").tobytes())
        fh.write(ds.related.astype("<u1").tobytes())


def load_dataset(path: str) -> PairedDataset:
    with open(path, "rb") as fh:
        if fh.read(4) != DATASET_MAGIC:
            raise ValueError(f"{path}: not a CMDS dataset file")
        version, num_classes, n_mod, noise_scale, map_seed, n_pairs = struct.unpack(
            "<IIIdqI", fh.read(32))
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        ppi, pair_seed = struct.unpack("<Iq", fh.read(12))
        names, obs_dims, private_dims, likelihoods, counts = [], [], [], [], []
        for _ in range(n_mod):
            (name_len,) = struct.unpack("<I", fh.read(4))
            names.append(fh.read(name_len).decode())
            d, p, lik = struct.unpack("<III", fh.read(12))
            (count,) = struct.unpack("<I", fh.read(4))
            obs_dims.append(d)
            private_dims.append(p)
            likelihoods.append("bernoulli" if lik == 0 else "gaussian")
            counts.append(count)
        spec = FactorSpec(num_classes=num_classes, modality_names=tuple(names),
                          obs_dims=tuple(obs_dims), private_dims=tuple(private_dims),
                          likelihoods=tuple(likelihoods), noise_scale=noise_scale,
                          map_seed=map_seed)
        observations, labels = {}, {}
        for name, d, count in zip(names, obs_dims, counts):
            observations[name] = np.frombuffer(fh.read(8 * d * count), dtype="<f8").reshape(count, d).copy()
            labels[name] = np.frombuffer(fh.read(8 * count), dtype="<i8").copy()
        pairs = np.frombuffer(fh.read(8 * n_pairs * n_mod), dtype="<i8").reshape(n_pairs, n_mod).copy()
        related = np.frombuffer(fh.read(n_pairs), dtype="<u1").copy()
    return PairedDataset(spec=spec, observations=observations, labels=labels,
                         pairs=pairs, related=related, pairs_per_instance=ppi,
                         pair_seed=pair_seed)


def dump_pairs_csv(ds: PairedDataset, path: str) -> None:
    """Debug dump, one row per pair: indices, relatedness flag, class labels."""
    names = ds.spec.modality_names
    lab = ds.pair_labels()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"idx_{n}" for n in names] + ["related"] + [f"label_{n}" for n in names])
        for p in range(len(ds)):
            writer.writerow([int(ds.pairs[p, m]) for m in range(len(names))]
                            + [int(ds.related[p])]
                            + [int(lab[n][p]) for n in names])


def make_related_dataset(spec: FactorSpec, items_per_modality: int, seed: int,
                         pairs_per_instance: int = 1) -> PairedDataset:
    """Convenience: draw both pools and pair them same-class (all r = 1)."""
    x = generate_unimodal(spec, items_per_modality, spec.modality_names[0], seed)
    y = generate_unimodal(spec, items_per_modality, spec.modality_names[1],
                          derive_rng(seed, tag("second_pool")).integers(1 << 62))
    return pair_related(spec, x, y, pairs_per_instance=pairs_per_instance, seed=seed)

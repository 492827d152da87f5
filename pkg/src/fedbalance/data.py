"""Dataset ingestion, client partitioning, and imbalance measurement.

Datasets hold features scaled to [0, 1] plus integer labels. Client
shards index into a shared dataset, so disjointness and isolation checks
are plain set operations on indices. Partitioning controls how unevenly
classes land on clients (local imbalance) and how uneven the class
totals are across all clients (global imbalance).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IdxFormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray  # (N, d), values in [0, 1]
    labels: np.ndarray  # (N,), values in [0, class_count)
    class_count: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty (N, d) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels length must match feature rows")
        if self.class_count < 2:
            raise ValueError("need at least two classes")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def indices_by_class(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.class_count)]


@dataclass
class ClientShard:
    """One client's slice of the shared dataset."""

    client_id: int
    dataset: Dataset = field(repr=False)
    indices: np.ndarray
    per_class_counts: np.ndarray
    feature_shift: np.ndarray | None = field(default=None, repr=False)

    @property
    def total(self) -> int:
        return int(self.per_class_counts.sum())

    def features_and_labels(self) -> tuple[np.ndarray, np.ndarray]:
        feats = self.dataset.features[self.indices]
        if self.feature_shift is not None:
            feats = feats + self.feature_shift
        return feats, self.dataset.labels[self.indices]


def make_shard(
    dataset: Dataset,
    client_id: int,
    indices: np.ndarray,
    feature_shift: np.ndarray | None = None,
) -> ClientShard:
    indices = np.asarray(indices, dtype=np.int64)
    counts = np.bincount(dataset.labels[indices], minlength=dataset.class_count)
    return ClientShard(client_id, dataset, indices, counts.astype(np.int64), feature_shift)


@dataclass
class PartitionPlan:
    num_clients: int
    classes_per_client: tuple[int, int]  # inclusive [c_min, c_max]
    samples_per_class: int
    global_ratio: float = 1.0
    minority_classes: tuple[int, ...] = ()
    seed: int = 0
    feature_shift_sigma: float = 0.0

    def validate(self, class_count: int) -> None:
        c_min, c_max = self.classes_per_client
        if not 1 <= c_min <= c_max <= class_count:
            raise ConfigError(
                f"classes_per_client {self.classes_per_client} invalid for {class_count} classes"
            )
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.global_ratio < 1.0:
            raise ConfigError("global_ratio must be >= 1")
        if any(not 0 <= c < class_count for c in self.minority_classes):
            raise ConfigError(f"minority classes {self.minority_classes} out of range")
        if self.global_ratio > 1.0 and not self.minority_classes:
            raise ConfigError("global_ratio > 1 needs a non-empty minority class set")


def _read_be_u32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise IdxFormatError(f"{path}: truncated header at offset {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX image/label files into a Dataset.

    Pixel bytes are scaled to [0, 1]. Malformed files raise
    IdxFormatError naming the offending byte offset.
    """
    images_path, labels_path = str(images_path), str(labels_path)
    with open(images_path, "rb") as f:
        img_buf = f.read()
    with open(labels_path, "rb") as f:
        lbl_buf = f.read()

    magic = _read_be_u32(img_buf, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad image magic 0x{magic:08x} at offset 0"
        )
    count = _read_be_u32(img_buf, 4, images_path)
    rows = _read_be_u32(img_buf, 8, images_path)
    cols = _read_be_u32(img_buf, 12, images_path)
    if count < 1:
        raise IdxFormatError(f"{images_path}: image count {count} at offset 4")
    expected = 16 + count * rows * cols
    if len(img_buf) < expected:
        raise IdxFormatError(
            f"{images_path}: truncated pixel data at offset {len(img_buf)} (expected {expected} bytes)"
        )

    magic = _read_be_u32(lbl_buf, 0, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad label magic 0x{magic:08x} at offset 0"
        )
    lbl_count = _read_be_u32(lbl_buf, 4, labels_path)
    if lbl_count != count:
        raise IdxFormatError(
            f"{labels_path}: label count {lbl_count} at offset 4 does not match {count} images"
        )
    if len(lbl_buf) < 8 + count:
        raise IdxFormatError(
            f"{labels_path}: truncated label data at offset {len(lbl_buf)}"
        )

    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    labels = np.frombuffer(lbl_buf, dtype=np.uint8, count=count, offset=8)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), class_count=int(labels.max()) + 1)


def write_idx(features: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Serialize byte-valued images and labels in the IDX layout.

    Features must already be scaled to [0, 1]; they are quantized to
    uint8. Each row is written as a 1 x d "image".
    """
    n, d = features.shape
    pixels = np.clip(np.rint(features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, 1, d))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def make_synthetic(
    class_count: int,
    feature_dim: int,
    per_class: int,
    separation: float,
    seed: int,
) -> Dataset:
    """Gaussian blobs, one unit-variance cloud per class.

    Class means are drawn and rescaled so their minimum pairwise distance
    equals at least ``separation`` before the whole feature block is
    min-max scaled into [0, 1].
    """
    if class_count < 2:
        raise ConfigError("class_count must be >= 2")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    if separation <= 0:
        raise ConfigError("separation must be > 0")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(class_count, feature_dim))
    dists = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
    min_dist = dists[np.triu_indices(class_count, k=1)].min()
    if min_dist <= 0:
        raise ConfigError("degenerate class means; use another seed")
    means *= separation / min_dist
    labels = np.repeat(np.arange(class_count), per_class)
    features = means[labels] + rng.standard_normal((labels.size, feature_dim))
    lo, hi = features.min(), features.max()
    features = (features - lo) / (hi - lo)
    return Dataset(features, labels, class_count)


def split_indices(
    dataset: Dataset,
    test_per_class: int,
    aux_per_class: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified (train_pool, test, aux) index split, disjoint by build."""
    rng = np.random.default_rng(seed)
    train_parts, test_parts, aux_parts = [], [], []
    for c, idx in enumerate(dataset.indices_by_class()):
        if idx.size < test_per_class + aux_per_class + 1:
            raise ConfigError(
                f"class {c} has {idx.size} samples; needs more than "
                f"{test_per_class} test + {aux_per_class} aux"
            )
        perm = rng.permutation(idx)
        test_parts.append(perm[:test_per_class])
        aux_parts.append(perm[test_per_class : test_per_class + aux_per_class])
        train_parts.append(perm[test_per_class + aux_per_class :])
    return (
        np.sort(np.concatenate(train_parts)),
        np.sort(np.concatenate(test_parts)),
        np.sort(np.concatenate(aux_parts)),
    )


def _assign_class_sets(
    plan: PartitionPlan, class_count: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Choose each client's class set; every class ends up held somewhere."""
    c_min, c_max = plan.classes_per_client
    sets = [
        rng.choice(class_count, size=rng.integers(c_min, c_max + 1), replace=False)
        for _ in range(plan.num_clients)
    ]
    held = np.zeros(class_count, dtype=np.int64)
    for s in sets:
        held[s] += 1
    for orphan in np.flatnonzero(held == 0):
        # swap the orphan in for this client's most-held class, keeping
        # the client's class count unchanged
        j = int(rng.integers(plan.num_clients))
        victim = sets[j][np.argmax(held[sets[j]])]
        held[victim] -= 1
        sets[j] = np.where(sets[j] == victim, orphan, sets[j])
        held[orphan] += 1
    return sets


def partition(
    dataset: Dataset,
    plan: PartitionPlan,
    allowed_indices: np.ndarray | None = None,
) -> list[ClientShard]:
    """Split (a subset of) a dataset into disjoint client shards.

    Each client receives ``samples_per_class`` samples for every class in
    its set; minority-class allocations are then scaled down so the
    realized global majority/minority ratio matches ``global_ratio``
    (within 10%, typically exactly). All draws are without replacement.
    """
    q = dataset.class_count
    plan.validate(q)
    rng = np.random.default_rng(plan.seed)

    pools: list[np.ndarray]
    if allowed_indices is None:
        pools = dataset.indices_by_class()
    else:
        allowed = np.asarray(allowed_indices, dtype=np.int64)
        pools = [allowed[dataset.labels[allowed] == c] for c in range(q)]
    pools = [rng.permutation(p) for p in pools]

    class_sets = _assign_class_sets(plan, q, rng)
    holders: list[list[int]] = [[] for _ in range(q)]
    for j, s in enumerate(class_sets):
        for c in s:
            holders[int(c)].append(j)

    # start from the uniform allocation
    alloc = np.zeros((plan.num_clients, q), dtype=np.int64)
    for c in range(q):
        alloc[holders[c], c] = plan.samples_per_class

    minority = set(plan.minority_classes) if plan.global_ratio > 1.0 else set()
    totals = alloc.sum(axis=0)
    shortfall = {
        c: (int(totals[c]), int(pools[c].size))
        for c in range(q)
        if totals[c] > pools[c].size and c not in minority
    }
    if shortfall:
        detail = ", ".join(
            f"class {c}: need {need}, have {have}" for c, (need, have) in shortfall.items()
        )
        raise ConfigError(f"partition infeasible: {detail}")

    if minority:
        majority_totals = [int(totals[c]) for c in range(q) if c not in minority]
        max_majority = max(majority_totals)
        # largest minority total whose implied ratio stays on target;
        # majority classes above the implied cap are trimmed to it
        m = max(1, math.floor(max_majority / plan.global_ratio))
        cap = int(round(plan.global_ratio * m))
        realized = cap / m if cap <= max_majority else max_majority / m
        if abs(realized - plan.global_ratio) / plan.global_ratio > 0.10:
            raise ConfigError(
                f"cannot realize global ratio {plan.global_ratio}: best achievable "
                f"{realized:.2f} with majority total {max_majority}"
            )
        for c in range(q):
            if c in minority:
                _spread(alloc, holders[c], c, m, rng)
            elif totals[c] > cap:
                _trim(alloc, holders[c], c, int(totals[c]) - cap, rng)
        minority_shortfall = {
            c: (int(alloc[:, c].sum()), int(pools[c].size))
            for c in minority
            if alloc[:, c].sum() > pools[c].size
        }
        if minority_shortfall:
            detail = ", ".join(
                f"class {c}: need {need}, have {have}"
                for c, (need, have) in minority_shortfall.items()
            )
            raise ConfigError(f"partition infeasible: {detail}")

    cursors = np.zeros(q, dtype=np.int64)
    shards = []
    for j in range(plan.num_clients):
        parts = []
        for c in range(q):
            k = int(alloc[j, c])
            if k:
                parts.append(pools[c][cursors[c] : cursors[c] + k])
                cursors[c] += k
        idx = np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
        shift = None
        if plan.feature_shift_sigma > 0:
            shift = rng.normal(0.0, plan.feature_shift_sigma, size=dataset.feature_dim)
        shards.append(make_shard(dataset, j, idx, shift))
    return shards


def _spread(
    alloc: np.ndarray, holders: list[int], c: int, total: int, rng: np.random.Generator
) -> None:
    """Distribute ``total`` samples of class c as evenly as possible."""
    alloc[holders, c] = total // len(holders)
    extra = total % len(holders)
    if extra:
        lucky = rng.choice(len(holders), size=extra, replace=False)
        for k in lucky:
            alloc[holders[int(k)], c] += 1


def _trim(
    alloc: np.ndarray, holders: list[int], c: int, excess: int, rng: np.random.Generator
) -> None:
    order = rng.permutation(len(holders))
    i = 0
    while excess > 0:
        j = holders[int(order[i % len(holders)])]
        if alloc[j, c] > 0:
            alloc[j, c] -= 1
            excess -= 1
        i += 1


def local_imbalance(shard: ClientShard) -> float:
    """Majority/minority count ratio on one client; inf when a class is absent."""
    counts = shard.per_class_counts
    if counts.sum() == 0:
        raise ValueError("shard is empty")
    smallest = counts.min()
    if smallest == 0:
        return math.inf
    return float(counts.max() / smallest)


def composition(shards: list[ClientShard]) -> np.ndarray:
    """Exact per-class sample totals across the given shards."""
    if not shards:
        raise ValueError("no shards given")
    return np.sum([s.per_class_counts for s in shards], axis=0)


def global_imbalance(shards: list[ClientShard]) -> float:
    totals = composition(shards)
    smallest = totals.min()
    if smallest == 0:
        return math.inf
    return float(totals.max() / smallest)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"need equal-length vectors, got {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))

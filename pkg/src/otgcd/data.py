"""Synthetic imbalanced category-discovery benchmarks.

Classes ``0 .. num_known-1`` are known (they appear in the labeled set);
the remaining ``num_unknown`` classes only occur in the unlabeled pool.
Each class is an isotropic Gaussian blob.  The unlabeled pool holds
``per_known_count`` samples of every known class and a decreasing profile of
unknown-class counts whose total is ``1 / rho`` of the known total.  The
labeled set is drawn separately so that the pool keeps its ratio exactly.

On disk a dataset is a directory with ``meta.json``, ``features.f32``
(little-endian float32, row-major), ``labels.i32`` and ``labeled.u8``; the
metadata carries a SHA-256 digest of the three payload files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import CorruptFile, InfeasibleProfile

FALLBACK_DECAY = 0.9


class Profile(str, Enum):
    EXPONENTIAL = "exponential"
    STEP = "step"


@dataclass
class SyntheticSpec:
    num_known: int = 5
    num_unknown: int = 5
    input_dim: int = 16
    cluster_spread: float = 1.0
    mean_scale: float = 3.0
    rho: float = 1.0
    profile: Profile = Profile.STEP
    per_known_count: int = 100
    labeled_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.profile = Profile(self.profile)
        if self.num_known < 1 or self.num_unknown < 1:
            raise ValueError("need at least one known and one unknown class")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.cluster_spread < 0 or not self.mean_scale > 0:
            raise ValueError("cluster_spread must be >= 0 and mean_scale > 0")

    @property
    def num_classes(self) -> int:
        return self.num_known + self.num_unknown

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile"] = self.profile.value
        return d


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    is_labeled: np.ndarray
    known_classes: frozenset
    spec: SyntheticSpec
    class_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.class_counts is None:
            self.class_counts = np.bincount(self.labels, minlength=self.num_classes)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def unlabeled_index(self) -> np.ndarray:
        return np.flatnonzero(~self.is_labeled)

    @property
    def labeled_index(self) -> np.ndarray:
        return np.flatnonzero(self.is_labeled)

    @property
    def unlabeled_counts(self) -> np.ndarray:
        return np.bincount(self.labels[~self.is_labeled], minlength=self.num_classes)

    @property
    def unlabeled_prior(self) -> np.ndarray:
        counts = self.unlabeled_counts
        return counts / counts.sum()


def _geometric_counts(head: float, decay: float, n: int) -> np.ndarray:
    return head * decay ** np.arange(n)


def imbalance_profile(rho: float, profile: Profile | str, num_known: int, num_unknown: int,
                      per_known_count: int) -> np.ndarray:
    """Per-class unlabeled-pool counts, known classes first.

    STEP gives every unknown class the same count.  EXPONENTIAL anchors the
    head unknown class at ``per_known_count`` and bisects for the decay that
    meets the unknown total; when no decay in ``[0, 1]`` yields counts of at
    least 2, the decay is fixed at 0.9 and the head is solved from the total.

    Raises:
        InfeasibleProfile: some class would receive fewer than 2 samples.
    """
    profile = Profile(profile)
    known = np.full(num_known, per_known_count, dtype=np.int64)
    total_unknown = num_known * per_known_count / rho
    if profile is Profile.STEP:
        unknown = np.full(num_unknown, round(total_unknown / num_unknown), dtype=np.int64)
    else:
        unknown = None
        head = float(per_known_count)
        if head <= total_unknown <= head * num_unknown:
            lo, hi = 0.0, 1.0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if _geometric_counts(head, mid, num_unknown).sum() < total_unknown:
                    lo = mid
                else:
                    hi = mid
            candidate = np.rint(_geometric_counts(head, 0.5 * (lo + hi), num_unknown))
            if candidate.min() >= 2:
                unknown = candidate.astype(np.int64)
        if unknown is None:
            g = FALLBACK_DECAY
            head = total_unknown * (1 - g) / (1 - g ** num_unknown)
            unknown = np.rint(_geometric_counts(head, g, num_unknown)).astype(np.int64)
    counts = np.concatenate([known, unknown])
    if counts.min() < 2:
        raise InfeasibleProfile(f"profile yields a class with {counts.min()} samples: {counts}")
    return counts


def generate(spec: SyntheticSpec) -> Dataset:
    """Sample a dataset; identical specs give identical arrays."""
    rng = np.random.default_rng(spec.seed)
    c, d = spec.num_classes, spec.input_dim
    means = rng.normal(size=(c, d)) * spec.mean_scale
    pool = imbalance_profile(spec.rho, spec.profile, spec.num_known, spec.num_unknown,
                             spec.per_known_count)
    n_lab = max(1, round(spec.labeled_fraction * spec.per_known_count))
    labeled = np.zeros(c, dtype=np.int64)
    labeled[:spec.num_known] = n_lab

    feats, labels, flags = [], [], []
    for counts, flag in ((pool, False), (labeled, True)):
        for k in range(c):
            n = int(counts[k])
            if n == 0:
                continue
            feats.append(means[k] + spec.cluster_spread * rng.normal(size=(n, d)))
            labels.append(np.full(n, k, dtype=np.int32))
            flags.append(np.full(n, flag))
    return Dataset(
        features=np.concatenate(feats).astype(np.float32).astype(np.float64),
        labels=np.concatenate(labels),
        is_labeled=np.concatenate(flags),
        known_classes=frozenset(range(spec.num_known)),
        spec=spec,
    )


def augment(features: np.ndarray, sigma_aug: float, seed=None) -> np.ndarray:
    """Add isotropic Gaussian noise of scale ``sigma_aug``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if sigma_aug == 0:
        return np.array(features, dtype=np.float64, copy=True)
    rng = np.random.default_rng(seed)
    return features + sigma_aug * rng.normal(size=np.shape(features))


_PAYLOAD = (("features.f32", "<f4"), ("labels.i32", "<i4"), ("labeled.u8", "u1"))


def _payload_bytes(ds: Dataset) -> list[bytes]:
    return [
        np.ascontiguousarray(ds.features, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.labels, dtype="<i4").tobytes(),
        np.ascontiguousarray(ds.is_labeled, dtype="u1").tobytes(),
    ]


def _digest(blobs) -> str:
    h = hashlib.sha256()
    for b in blobs:
        h.update(b)
    return h.hexdigest()


def save(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = _payload_bytes(dataset)
    for (name, _), blob in zip(_PAYLOAD, blobs):
        (path / name).write_bytes(blob)
    meta = {
        "format": "otgcd-dataset",
        "version": 1,
        "num_rows": int(dataset.features.shape[0]),
        "input_dim": int(dataset.features.shape[1]),
        "num_classes": int(dataset.num_classes),
        "known_classes": sorted(int(k) for k in dataset.known_classes),
        "class_counts": [int(x) for x in dataset.class_counts],
        "unlabeled_counts": [int(x) for x in dataset.unlabeled_counts],
        "spec": dataset.spec.to_dict(),
        "sha256": _digest(blobs),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
        blobs = [(path / name).read_bytes() for name, _ in _PAYLOAD]
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: cannot read dataset ({exc})") from exc
    n, d = meta.get("num_rows"), meta.get("input_dim")
    if not isinstance(n, int) or not isinstance(d, int):
        raise CorruptFile(f"{path}: malformed header")
    expected = (4 * n * d, 4 * n, n)
    if tuple(len(b) for b in blobs) != expected:
        raise CorruptFile(f"{path}: payload sizes do not match header")
    if _digest(blobs) != meta.get("sha256"):
        raise CorruptFile(f"{path}: digest mismatch")
    features = np.frombuffer(blobs[0], dtype="<f4").reshape(n, d).astype(np.float64)
    labels = np.frombuffer(blobs[1], dtype="<i4").astype(np.int32)
    flags = np.frombuffer(blobs[2], dtype="u1").astype(bool)
    return Dataset(features, labels, flags, frozenset(meta["known_classes"]),
                   SyntheticSpec(**meta["spec"]),
                   np.asarray(meta["class_counts"], dtype=np.int64))


def file_digest(path) -> str:
    """Digest of a saved dataset's payload as recomputed from disk."""
    path = Path(path)
    return _digest([(path / name).read_bytes() for name, _ in _PAYLOAD])


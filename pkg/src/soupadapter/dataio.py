"""Embedding containers, manifests, few-shot sampling, synthetic benchmarks.

Container format (binary, little-endian):

    magic    4 bytes  b"SADP"
    version  u32      1
    D        u32      feature dimension
    N        u32      sample count
    V        u32      views per sample (view 0 is the clean view)
    C        u32      class count
    labels   N x u32
    features N x V x D float32, row-major (sample, then view, then dim)

Every view vector must be unit-norm within 1e-4 (32-bit storage slack);
features are re-normalized in 64-bit when read back for computation. A
manifest is a UTF-8 JSON file alongside the container with keys "dataset",
"classes", "splits" and "model".
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagic, CorruptLength, InsufficientShots, IoFailure,
                     NormViolation, VersionUnsupported)
from .numerics import normalize_rows
from .rng import stream

CONTAINER_MAGIC = b"SADP"
CONTAINER_VERSION = 1
NORM_TOLERANCE = 1e-4

_HEADER = struct.Struct("<4s5I")


@dataclass
class EmbeddingSet:
    """Unit-norm feature vectors with class labels and optional extra views.

    ``features`` is kept in float32 exactly as stored on disk so container
    round-trips are bit-exact; use :meth:`unit_features` for computation.
    """

    features: np.ndarray  # (N, V, D) float32
    labels: np.ndarray    # (N,) integer class indices
    n_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 3:
            raise CorruptLength("features must have shape (N, V, D)")
        n, v, d = self.features.shape
        if min(n, v, d, self.n_classes) < 1:
            raise CorruptLength("N, V, D and C must all be positive")
        if self.labels.shape != (n,):
            raise CorruptLength("labels length must equal the sample count")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise CorruptLength("labels must lie in [0, C)")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def views(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def validate_norms(self):
        norms = np.linalg.norm(self.features.astype(np.float64), axis=2)
        bad = np.argwhere(np.abs(norms - 1.0) > NORM_TOLERANCE)
        if bad.size:
            i, v = bad[0]
            raise NormViolation(
                f"sample {i} view {v} has norm {norms[i, v]:.6f}, "
                f"expected 1 within {NORM_TOLERANCE:g}")

    def unit_features(self, view: int = 0, indices=None) -> np.ndarray:
        """Float64 features of one view, re-normalized to exact unit norm."""
        feats = self.features[:, view, :] if indices is None \
            else self.features[np.asarray(indices, dtype=np.int64), view, :]
        return normalize_rows(feats.astype(np.float64))


@dataclass
class Manifest:
    """Names for a container: dataset, classes, splits, source model tag."""

    dataset: str
    classes: list[str]
    splits: dict[str, list[int]] = field(default_factory=dict)
    model: str = ""

    def validate_against(self, emb: EmbeddingSet):
        if len(self.classes) != emb.n_classes:
            raise CorruptLength(
                f"manifest lists {len(self.classes)} classes, "
                f"container has {emb.n_classes}")
        for name, idx in self.splits.items():
            if idx and (min(idx) < 0 or max(idx) >= emb.n):
                raise CorruptLength(f"split '{name}' has out-of-range indices")


@dataclass
class FewShotSelection:
    """Per-class sample indices chosen for training, n_shot per class."""

    n_shot: int
    seed: int
    indices: list[list[int]]  # per class, ascending

    def flat(self) -> list[tuple[int, int, int]]:
        """(set index, class, slot within class) in class-major order."""
        return [(idx, c, s)
                for c, cls in enumerate(self.indices)
                for s, idx in enumerate(cls)]


# ----------------------------------------------------------------- container

def write_container(emb: EmbeddingSet, path):
    n, v, d = emb.features.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION,
                                  d, n, v, emb.n_classes))
            fh.write(emb.labels.astype("<u4").tobytes())
            fh.write(emb.features.astype("<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write container: {exc}") from exc


def read_container(path) -> EmbeddingSet:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read container: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise CorruptLength(f"file too short for header ({len(blob)} bytes)")
    magic, version, d, n, v, c = _HEADER.unpack_from(blob)
    if magic != CONTAINER_MAGIC:
        raise BadMagic(f"expected {CONTAINER_MAGIC!r}, found {magic!r}")
    if version != CONTAINER_VERSION:
        raise VersionUnsupported(f"container version {version} not supported")
    if min(d, n, v, c) < 1:
        raise CorruptLength("header dimensions must be positive")
    expect = _HEADER.size + 4 * n + 4 * n * v * d
    if len(blob) != expect:
        raise CorruptLength(f"expected {expect} bytes, found {len(blob)}")
    off = _HEADER.size
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    feats = np.frombuffer(blob, dtype="<f4", count=n * v * d, offset=off)
    if labels.max(initial=0) >= c:
        raise CorruptLength("label value out of range for class count")
    emb = EmbeddingSet(features=feats.reshape(n, v, d), labels=labels, n_classes=c)
    emb.validate_norms()
    return emb


# ------------------------------------------------------------------ manifest

def manifest_path_for(container_path) -> str:
    return str(container_path) + ".json"


def write_manifest(manifest: Manifest, path):
    doc = {"dataset": manifest.dataset, "classes": manifest.classes,
           "splits": manifest.splits, "model": manifest.model}
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest: {exc}") from exc


def read_manifest(path) -> Manifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptLength(f"manifest is not valid JSON: {exc}") from exc
    return Manifest(dataset=doc["dataset"], classes=list(doc["classes"]),
                    splits={k: list(v) for k, v in doc["splits"].items()},
                    model=doc.get("model", ""))


# ------------------------------------------------------------------ sampling

def sample_few_shot(emb: EmbeddingSet, split, n_shot: int,
                    seed: int) -> FewShotSelection:
    """Pick n_shot samples per class from the split, without replacement.

    Each class draws from its own stream (seed, "fewshot", class), so the
    result is unaffected by how other classes' samples are stored. The
    chosen indices are returned in ascending order.
    """
    split = np.asarray(list(split), dtype=np.int64)
    per_class: list[list[int]] = [[] for _ in range(emb.n_classes)]
    for idx in split:
        per_class[int(emb.labels[idx])].append(int(idx))
    selection: list[list[int]] = []
    for c, candidates in enumerate(per_class):
        if len(candidates) < n_shot:
            raise InsufficientShots(c, len(candidates))
        candidates = sorted(candidates)
        rng = stream(seed, "fewshot", c)
        perm = rng.permutation(len(candidates))
        chosen = sorted(candidates[int(i)] for i in perm[:n_shot])
        selection.append(chosen)
    return FewShotSelection(n_shot=n_shot, seed=seed, indices=selection)


# ----------------------------------------------------------------- synthetic

def _rotate_toward(mean: np.ndarray, rng, angle: float) -> np.ndarray:
    """Rotate a unit vector by exactly `angle` toward a seeded direction."""
    d = mean.shape[0]
    while True:
        g = rng.unit_vector(d)
        w = g - np.dot(g, mean) * mean
        norm = float(np.linalg.norm(w))
        if norm > 1e-6:
            break
    w /= norm
    return math.cos(angle) * mean + math.sin(angle) * w


def _sample_class(mean: np.ndarray, count: int, noise: float, rng) -> np.ndarray:
    if noise == 0.0:
        return np.tile(mean, (count, 1))
    pts = mean[np.newaxis, :] + noise * rng.normal_array(count * mean.size) \
        .reshape(count, mean.size)
    return normalize_rows(pts)


def generate_synthetic(n_classes: int, dim: int, per_class: int,
                       shift_angle: float, noise: float, seed: int):
    """Seeded spherical-mixture benchmark: (train, id-test, ood-test).

    Class means are uniform on the sphere; samples are unit-normalized
    mean + Gaussian noise. The out-of-distribution set rotates every class
    mean by shift_angle (labels unchanged) before sampling, so shift_angle=0
    makes the id and ood sets share the same distribution.
    """
    if dim < 2 or n_classes < 2:
        raise ValueError("need dim >= 2 and n_classes >= 2")
    mean_rng = stream(seed, "synth.means")
    means = np.stack([mean_rng.unit_vector(dim) for _ in range(n_classes)])
    shift_rng = stream(seed, "synth.shift")
    shifted = np.stack([_rotate_toward(means[c], shift_rng, shift_angle)
                        for c in range(n_classes)])

    def build(tag: str, centers: np.ndarray) -> EmbeddingSet:
        rng = stream(seed, tag)
        feats = np.concatenate([_sample_class(centers[c], per_class, noise, rng)
                                for c in range(n_classes)])
        labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
        return EmbeddingSet(features=feats.astype(np.float32)[:, np.newaxis, :],
                            labels=labels, n_classes=n_classes)

    return (build("synth.train", means),
            build("synth.id", means),
            build("synth.ood", shifted))

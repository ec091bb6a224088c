"""Classifier heads: class prototypes, imported weight files, KNN voting.

A head is a C x D matrix of unit-norm class rows plus a logit scale;
logits for a unit feature f are exp(scale) * (W @ f), so the temperature
is 1 / exp(scale) and the argmax never depends on it. Default scale is
ln(100), the conventional operating point for cosine-similarity heads.

Head file format (binary, little-endian): magic b"SHED", version u32=1,
C u32, D u32, scale float64, rows C x D float32 (unit-norm within 1e-4).
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (BadMagic, CorruptLength, DegenerateVector, EmptyBank,
                     EmptyClass, IoFailure, NormViolation, VersionUnsupported)
from .numerics import DEGENERATE_NORM, normalize_rows

HEAD_MAGIC = b"SHED"
HEAD_VERSION = 1
DEFAULT_SCALE = math.log(100.0)
NORM_TOLERANCE = 1e-4

ORIGIN_PROTOTYPE = "prototype"
ORIGIN_IMPORTED = "imported"

_HEADER = struct.Struct("<4s3Id")


@dataclass
class ClassifierHead:
    weights: np.ndarray  # (C, D) float64, unit-norm rows
    scale: float = DEFAULT_SCALE
    origin: str = ORIGIN_PROTOTYPE

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if not np.isfinite(self.scale):
            raise ValueError("scale must be finite")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class KnnConfig:
    k: int = 10
    temperature: float = 0.1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


# ---------------------------------------------------------------- prototypes

def _prototype_row(prompts: np.ndarray, skip: int = -1) -> np.ndarray:
    """Normalized sum of prompt rows in ascending index order."""
    total = np.zeros(prompts.shape[1], dtype=np.float64)
    for j in range(prompts.shape[0]):
        if j != skip:
            total += prompts[j]
    norm = float(np.linalg.norm(total))
    if norm < DEGENERATE_NORM:
        raise DegenerateVector("class prompt embeddings sum to (near) zero")
    return total / norm


def build_prototypes(prompts, scale: float = DEFAULT_SCALE) -> ClassifierHead:
    """Head whose class rows are normalized sums of per-class prompt vectors.

    ``prompts`` is one array (or list) of D-dim embeddings per class.
    """
    rows = []
    for c, cls_prompts in enumerate(prompts):
        cls_prompts = np.asarray(cls_prompts, dtype=np.float64)
        if cls_prompts.size == 0:
            raise EmptyClass(f"class {c} has no prompt embeddings")
        rows.append(_prototype_row(np.atleast_2d(cls_prompts)))
    return ClassifierHead(weights=np.stack(rows), scale=scale,
                          origin=ORIGIN_PROTOTYPE)


def build_prototypes_masked(prompts, excluded: tuple[int, int],
                            scale: float = DEFAULT_SCALE) -> ClassifierHead:
    """Like build_prototypes, but one prompt is left out of its class sum.

    ``excluded`` is (class index, prompt index). A single-prompt class
    falls back to its unmasked prototype with a warning, since leaving its
    only prompt out would erase the class entirely.
    """
    head = build_prototypes(prompts, scale=scale)
    c, j = excluded
    cls_prompts = np.atleast_2d(np.asarray(prompts[c], dtype=np.float64))
    if cls_prompts.shape[0] == 1:
        warnings.warn(f"class {c} has a single prompt; keeping it unmasked",
                      RuntimeWarning, stacklevel=2)
        return head
    head.weights[c] = _prototype_row(cls_prompts, skip=j)
    return head


# -------------------------------------------------------------------- logits

def head_logits(head: ClassifierHead, f: np.ndarray) -> np.ndarray:
    """exp(scale) * (W @ f) for a unit feature f, or rows of features."""
    f = np.asarray(f, dtype=np.float64)
    return math.exp(head.scale) * (f @ head.weights.T)


def knn_logits(bank_features: np.ndarray, bank_labels: np.ndarray,
               x: np.ndarray, cfg: KnnConfig,
               num_classes: int | None = None) -> np.ndarray:
    """Temperature-weighted votes of the k nearest bank entries.

    Neighbors are ranked by cosine similarity (features are unit vectors, so
    the dot product), ties broken toward the lower bank index; each neighbor
    adds exp(similarity / T) to its class logit. k is clamped to the bank
    size. Accumulation runs in rank order.
    """
    bank_features = np.asarray(bank_features, dtype=np.float64)
    bank_labels = np.asarray(bank_labels, dtype=np.int64)
    if bank_features.shape[0] == 0:
        raise EmptyBank("KNN bank is empty")
    if num_classes is None:
        num_classes = int(bank_labels.max()) + 1
    sims = bank_features @ np.asarray(x, dtype=np.float64)
    k = min(cfg.k, sims.size)
    ranked = np.argsort(-sims, kind="stable")[:k]  # stable sort breaks ties low
    logits = np.zeros(num_classes, dtype=np.float64)
    for j in ranked:
        logits[bank_labels[j]] += math.exp(sims[j] / cfg.temperature)
    return logits


def knn_logits_batch(bank_features: np.ndarray, bank_labels: np.ndarray,
                     xs: np.ndarray, cfg: KnnConfig,
                     num_classes: int | None = None) -> np.ndarray:
    """knn_logits for every row of xs, vectorized over the bank scan."""
    bank_features = np.asarray(bank_features, dtype=np.float64)
    bank_labels = np.asarray(bank_labels, dtype=np.int64)
    if bank_features.shape[0] == 0:
        raise EmptyBank("KNN bank is empty")
    if num_classes is None:
        num_classes = int(bank_labels.max()) + 1
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    sims = xs @ bank_features.T  # (B, bank)
    k = min(cfg.k, bank_features.shape[0])
    out = np.zeros((xs.shape[0], num_classes), dtype=np.float64)
    for b in range(xs.shape[0]):
        ranked = np.argsort(-sims[b], kind="stable")[:k]
        for j in ranked:
            out[b, bank_labels[j]] += math.exp(sims[b, j] / cfg.temperature)
    return out


# ----------------------------------------------------------------- head file

def export_head(head: ClassifierHead, path):
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(HEAD_MAGIC, HEAD_VERSION, head.n_classes,
                                  head.dim, float(head.scale)))
            fh.write(head.weights.astype("<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write head file: {exc}") from exc


def import_head(path) -> ClassifierHead:
    """Read a head file; rows are re-normalized in 64-bit on the way in."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read head file: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise CorruptLength(f"file too short for header ({len(blob)} bytes)")
    magic, version, c, d, scale = _HEADER.unpack_from(blob)
    if magic != HEAD_MAGIC:
        raise BadMagic(f"expected {HEAD_MAGIC!r}, found {magic!r}")
    if version != HEAD_VERSION:
        raise VersionUnsupported(f"head version {version} not supported")
    expect = _HEADER.size + 4 * c * d
    if len(blob) != expect:
        raise CorruptLength(f"expected {expect} bytes, found {len(blob)}")
    rows = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size) \
        .reshape(c, d).astype(np.float64)
    norms = np.linalg.norm(rows, axis=1)
    bad = np.argwhere(np.abs(norms - 1.0) > NORM_TOLERANCE)
    if bad.size:
        i = int(bad[0][0])
        raise NormViolation(f"head row {i} has norm {norms[i]:.6f}, "
                            f"expected 1 within {NORM_TOLERANCE:g}")
    return ClassifierHead(weights=normalize_rows(rows), scale=scale,
                          origin=ORIGIN_IMPORTED)

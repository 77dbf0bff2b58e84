"""Quantitative evaluation of image sets: FID, Inception Score, k-NN
precision/recall, and classifier accuracy.

The feature extractor is pluggable. Desk-scale runs train a small CNN on
the toy dataset (jointly on class and real/degraded provenance, so its
features are sensitive to the degradations being measured); full-scale
runs can ingest externally computed feature files instead, so paper-grade
embeddings never need to be bundled.

Feature extraction may run batch-parallel; the FID and precision/recall
reductions are single-threaded and deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn as nn

from .datapipe import ImageBatch, as_batches
from .errors import ConfigurationError, DataError, NumericError
from .model import JointModel, batch_to_tensor

_FEAT_MAGIC = b"JBFT0001"

# Eigenvalues of the covariance square roots are floored here. This is the
# main source of platform-level variance in FID values.
_EIG_FLOOR = 1e-10


@dataclass
class FeatureSet:
    """Per-image feature vectors with the extractor that produced them."""

    features: np.ndarray
    extractor_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError(f"features must be (N, D), got {self.features.shape}")

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class MetricReport:
    fid: float
    is_mean: float
    is_std: float
    precision: float
    recall: float
    reference_count: int
    candidate_count: int
    extractor_id: str
    accuracy: Optional[float] = None

    def to_dict(self) -> dict:
        out = {
            "FID": self.fid,
            "IS": self.is_mean,
            "IS_std": self.is_std,
            "Precision": self.precision,
            "Recall": self.recall,
            "reference_count": self.reference_count,
            "candidate_count": self.candidate_count,
            "extractor_id": self.extractor_id,
        }
        if self.accuracy is not None:
            out["Accuracy"] = self.accuracy
        return out


def _check_pair(ref: FeatureSet, cand: FeatureSet, min_count: int = 2) -> None:
    if ref.extractor_id != cand.extractor_id:
        raise DataError(
            f"extractor mismatch: {ref.extractor_id!r} vs {cand.extractor_id!r}"
        )
    if ref.dim != cand.dim:
        raise DataError(f"feature dims differ: {ref.dim} vs {cand.dim}")
    if ref.count < min_count or cand.count < min_count:
        raise DataError(f"need at least {min_count} samples per set")


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < -1e-6 * max(1.0, abs(vals.max())):
        raise NumericError(f"covariance not PSD after flooring (min eigenvalue {vals.min()})")
    vals = np.maximum(vals, _EIG_FLOOR)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(ref: FeatureSet, cand: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    ||mu_r - mu_c||^2 + Tr(S_r + S_c - 2 (S_r S_c)^(1/2)), with the matrix
    square root taken by symmetric eigendecomposition of
    sqrt(S_r) S_c sqrt(S_r) and small-eigenvalue flooring.
    """
    _check_pair(ref, cand)
    mu_r, mu_c = ref.features.mean(axis=0), cand.features.mean(axis=0)
    sigma_r = np.cov(ref.features, rowvar=False).reshape(ref.dim, ref.dim)
    sigma_c = np.cov(cand.features, rowvar=False).reshape(cand.dim, cand.dim)

    sqrt_r = _psd_sqrt(sigma_r)
    inner = sqrt_r @ sigma_c @ sqrt_r
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if vals.min() < -1e-6 * max(1.0, abs(vals.max())):
        raise NumericError(f"cross term not PSD after flooring (min eigenvalue {vals.min()})")
    tr_sqrt = np.sqrt(np.maximum(vals, _EIG_FLOOR)).sum()

    diff = mu_r - mu_c
    value = float(diff @ diff + np.trace(sigma_r) + np.trace(sigma_c) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def inception_score(probs: np.ndarray, splits: int = 10) -> tuple:
    """exp(mean KL(p(y|x) || p(y))) per split; returns (mean, std).

    Probabilities are floored at 1e-12 before the logs.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise DataError(f"probs must be (N, C), got {probs.shape}")
    if splits < 1:
        raise ConfigurationError("splits must be >= 1")
    n = probs.shape[0]
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-5):
        raise DataError("class probability rows must sum to 1")

    scores = []
    for part in np.array_split(np.arange(n), splits):
        if part.size == 0:
            continue
        p = np.maximum(probs[part], 1e-12)
        marginal = np.maximum(p.mean(axis=0), 1e-12)
        kl = (p * (np.log(p) - np.log(marginal))).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=-1)


def precision_recall(ref: FeatureSet, cand: FeatureSet, k: int = 3) -> tuple:
    """Manifold precision/recall via k-NN balls.

    Precision is the fraction of candidate features lying inside the union
    of k-NN balls around reference features; recall is the symmetric
    quantity. Ties (distance exactly equal to a ball radius) count as
    inside, which pins down duplicate-point sets.
    """
    _check_pair(ref, cand, min_count=2)
    if not (0 < k < min(ref.count, cand.count)):
        raise ConfigurationError(f"k must satisfy 0 < k < min set size, got k={k}")
    return (
        _manifold_fraction(ref.features, cand.features, k),
        _manifold_fraction(cand.features, ref.features, k),
    )


def _manifold_fraction(support: np.ndarray, queries: np.ndarray, k: int) -> float:
    d_ss = _sq_dists(support, support)
    np.fill_diagonal(d_ss, np.inf)  # k-th neighbor among *other* support points
    radii = np.sort(d_ss, axis=1)[:, k - 1]
    d_qs = _sq_dists(queries, support)
    inside = (d_qs <= radii[None, :]).any(axis=1)
    return float(inside.mean())


def accuracy(model: JointModel, batch: ImageBatch) -> float:
    """Fraction of argmax-correct predictions on a labeled batch."""
    if batch.labels is None:
        raise DataError("accuracy needs a labeled batch")
    with torch.no_grad():
        logits = model.logits(batch_to_tensor(batch))
        pred = logits.argmax(dim=-1).cpu().numpy()
    return float((pred == batch.labels).mean())


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


class FlattenExtractor:
    """Identity features: flattened pixels. Useful as an analytic oracle."""

    identifier = "flatten"

    def extract(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=np.float64)
        return pixels.reshape(pixels.shape[0], -1)

    def class_probs(self, pixels: np.ndarray) -> None:
        return None


class _ExtractorNet(nn.Module):
    def __init__(self, in_channels: int, num_outputs: int, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1, stride=2)
        self.act = nn.ReLU()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(2 * width, num_outputs)

    def features(self, x):
        h = self.act(self.conv1(x))
        h = self.act(self.conv2(h))
        return self.pool(h).flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


class TinyCnnExtractor:
    """Small CNN feature extractor trained on the toy dataset.

    Trained to predict the product label (class, provenance), so the
    penultimate features respond both to class content and to the
    degradations that separate real from generated samples. Class
    posteriors for the Inception Score are recovered by marginalizing the
    product softmax over provenance.
    """

    def __init__(self, net: _ExtractorNet, num_classes: int, identifier: str):
        self.net = net
        self.num_classes = num_classes
        self.identifier = identifier
        self.net.eval()

    def _tensor(self, pixels: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(np.ascontiguousarray(pixels.astype(np.float32)))
        return x.permute(0, 3, 1, 2).contiguous()

    def extract(self, pixels: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.net.features(self._tensor(pixels)).cpu().numpy().astype(np.float64)

    def class_probs(self, pixels: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            logits = self.net(self._tensor(pixels))
            probs = torch.softmax(logits, dim=-1).cpu().numpy().astype(np.float64)
        # (N, 2C) product posterior -> (N, C) by summing the provenance axis.
        n = probs.shape[0]
        return probs.reshape(n, 2, self.num_classes).sum(axis=1)


def train_toy_extractor(
    real: ImageBatch,
    generated: ImageBatch,
    num_classes: int,
    width: int = 8,
    epochs: int = 30,
    batch_size: int = 64,
    lr: float = 0.01,
    seed: int = 0,
) -> TinyCnnExtractor:
    """Fit the desk-scale extractor on (class x provenance) product labels."""
    torch.manual_seed(seed)
    net = _ExtractorNet(real.pixels.shape[-1], 2 * num_classes, width)
    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=0.9)
    loss_fn = nn.CrossEntropyLoss()

    pixels = np.concatenate([real.pixels, generated.pixels])
    labels = np.concatenate([real.labels, generated.labels + num_classes])
    x_all = torch.from_numpy(pixels).permute(0, 3, 1, 2).contiguous()
    y_all = torch.from_numpy(labels)

    rng = np.random.default_rng(seed)
    n = x_all.shape[0]
    net.train()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy())
            opt.zero_grad()
            out = net(x_all[idx])
            loss = loss_fn(out, y_all[idx])
            loss.backward()
            opt.step()
    net.eval()
    ident = f"tiny-cnn-c{num_classes}-w{width}-seed{seed}"
    return TinyCnnExtractor(net, num_classes, ident)


def extract_features(extractor, batches: Iterable[ImageBatch]) -> FeatureSet:
    if isinstance(batches, ImageBatch):
        batches = as_batches(batches, 256)
    feats = [extractor.extract(b.pixels) for b in batches]
    if not feats:
        raise DataError("no batches to extract features from")
    return FeatureSet(np.concatenate(feats), extractor.identifier)


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------
#
# Byte layout: magic, u32 version, u32 count, u32 dim, u16 extractor-id
# length, extractor id (UTF-8), then count*dim float32 values row-major.


def save_features(path, feature_set: FeatureSet) -> None:
    data = feature_set.features.astype("<f4")
    ident = feature_set.extractor_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_FEAT_MAGIC)
        f.write(struct.pack("<III", 1, data.shape[0], data.shape[1]))
        f.write(struct.pack("<H", len(ident)))
        f.write(ident)
        f.write(np.ascontiguousarray(data).tobytes())


def load_features(path) -> FeatureSet:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _FEAT_MAGIC:
            raise DataError(f"{path}: not a feature file (bad magic {magic!r})")
        version, count, dim = struct.unpack("<III", f.read(12))
        if version != 1:
            raise DataError(f"{path}: unsupported feature file version {version}")
        (id_len,) = struct.unpack("<H", f.read(2))
        ident = f.read(id_len).decode("utf-8")
        blob = f.read(count * dim * 4)
        if len(blob) != count * dim * 4:
            raise DataError(f"{path}: feature payload truncated")
    feats = np.frombuffer(blob, dtype="<f4").reshape(count, dim).astype(np.float64)
    return FeatureSet(feats, ident)

"""Image ingestion: labeled batches, packed containers, and toy data.

Real and generated corpora enter through the same two layouts:

* a directory of class subdirectories holding PNG images (labels are the
  sorted subdirectory index), or
* a packed container file (see ``write_container``) holding per-image
  records with a shape header, a label and raw float32 pixels.

Pixels are always normalized to [0, 1] at ingestion, and every batch
carries per-image class labels plus a real/generated provenance flag that
the loss functions check before use. Streams are single-consumer
iterators; independent streams may run concurrently.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError

REAL = 0
GENERATED = 1

_MAGIC = b"JBPK0001"
_PNG_SUFFIXES = {".png", ".PNG"}


@dataclass
class ImageBatch:
    """A batch of images with labels and real/generated provenance.

    ``pixels`` is (N, H, W, C) float32 in [0, 1]. ``provenance`` is a
    per-image array of ``REAL``/``GENERATED``; ``None`` marks an unflagged
    batch, which the training loss refuses. ``attacked`` is set by the
    attack stage and checked by the trainer before any loss touches the
    batch.
    """

    pixels: np.ndarray
    labels: np.ndarray
    provenance: Optional[np.ndarray] = None
    attacked: bool = False
    source_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4:
            raise DataError(f"pixels must be (N, H, W, C), got shape {self.pixels.shape}")
        n = self.pixels.shape[0]
        if n < 1:
            raise DataError("empty batch (N must be >= 1)")
        if self.labels.shape != (n,):
            raise DataError(f"labels must be ({n},), got {self.labels.shape}")
        if np.any(self.labels < 0):
            raise DataError("negative class label")
        if not np.all(np.isfinite(self.pixels)):
            raise DataError("non-finite pixel values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError(
                f"pixels outside [0, 1]: range [{self.pixels.min()}, {self.pixels.max()}]"
            )
        if self.provenance is not None:
            self.provenance = np.asarray(self.provenance, dtype=np.uint8)
            if self.provenance.shape != (n,):
                raise DataError(f"provenance must be ({n},), got {self.provenance.shape}")
            if not np.all(np.isin(self.provenance, (REAL, GENERATED))):
                raise DataError("provenance entries must be REAL (0) or GENERATED (1)")

    @property
    def n(self) -> int:
        return self.pixels.shape[0]

    @property
    def image_shape(self) -> tuple:
        return self.pixels.shape[1:]

    def is_all(self, flag: int) -> bool:
        return self.provenance is not None and bool(np.all(self.provenance == flag))

    def with_pixels(self, pixels: np.ndarray, attacked: Optional[bool] = None) -> "ImageBatch":
        return replace(
            self,
            pixels=np.asarray(pixels, dtype=np.float32),
            attacked=self.attacked if attacked is None else attacked,
        )

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.pixels).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


def make_batch(pixels, labels, provenance: int, attacked: bool = False, source_id: str = "") -> ImageBatch:
    """Build a batch whose images all share one provenance flag."""
    pixels = np.asarray(pixels, dtype=np.float32)
    flags = np.full(pixels.shape[0], provenance, dtype=np.uint8)
    return ImageBatch(pixels, labels, flags, attacked=attacked, source_id=source_id)


def concat_batches(a: ImageBatch, b: ImageBatch) -> ImageBatch:
    if a.image_shape != b.image_shape:
        raise DataError("cannot concatenate batches with different image shapes")
    prov = None
    if a.provenance is not None and b.provenance is not None:
        prov = np.concatenate([a.provenance, b.provenance])
    return ImageBatch(
        np.concatenate([a.pixels, b.pixels]),
        np.concatenate([a.labels, b.labels]),
        prov,
        attacked=a.attacked and b.attacked,
        source_id=a.source_id,
    )


def as_batches(batch: ImageBatch, batch_size: int) -> Iterator[ImageBatch]:
    """Slice one batch into a stream of batches of at most ``batch_size``."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    for start in range(0, batch.n, batch_size):
        sl = slice(start, start + batch_size)
        prov = None if batch.provenance is None else batch.provenance[sl]
        yield ImageBatch(
            batch.pixels[sl], batch.labels[sl], prov,
            attacked=batch.attacked, source_id=batch.source_id,
        )


# ---------------------------------------------------------------------------
# Packed container format
# ---------------------------------------------------------------------------
#
# Byte layout (all integers little-endian):
#   magic   8 bytes  b"JBPK0001"
#   u32     header length in bytes
#   header  UTF-8 JSON: {"version", "count", "num_classes", "provenance",
#           "source_id", "records": [{"id", "label", "shape", "dtype",
#           "offset", "nbytes", "compression"}, ...]}
#   payload concatenated per-record pixel bytes (row-major float32 in [0,1],
#           optionally zlib-compressed per record)
#
# The header is serialized with sorted keys and no timestamps so that
# writing the same arrays always produces identical bytes.


def write_container(
    path,
    pixels: np.ndarray,
    labels: Sequence[int],
    provenance: int,
    num_classes: Optional[int] = None,
    source_id: str = "",
    ids: Optional[Sequence[str]] = None,
    compression: str = "none",
) -> None:
    """Write images + labels to a packed container file."""
    pixels = np.asarray(pixels, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if pixels.ndim != 4 or pixels.shape[0] != labels.shape[0]:
        raise DataError("pixels must be (N, H, W, C) with one label per image")
    if compression not in ("none", "zlib"):
        raise ConfigurationError(f"unknown compression {compression!r}")
    if ids is None:
        ids = [f"{i:06d}" for i in range(pixels.shape[0])]

    records = []
    blobs = []
    offset = 0
    for i in range(pixels.shape[0]):
        raw = np.ascontiguousarray(pixels[i]).tobytes()
        blob = zlib.compress(raw) if compression == "zlib" else raw
        records.append(
            {
                "id": str(ids[i]),
                "label": int(labels[i]),
                "shape": list(pixels[i].shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": len(blob),
                "compression": compression,
            }
        )
        blobs.append(blob)
        offset += len(blob)

    header = {
        "version": 1,
        "count": int(pixels.shape[0]),
        "num_classes": None if num_classes is None else int(num_classes),
        "provenance": "generated" if provenance == GENERATED else "real",
        "source_id": source_id,
        "records": records,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def read_container_header(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise DataError(f"{path}: not a packed container (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: corrupt container header: {e}") from e
    if header.get("version") != 1:
        raise DataError(f"{path}: unsupported container version {header.get('version')}")
    header["_payload_start"] = 8 + 4 + hlen
    return header


def iter_records(path) -> Iterator[tuple]:
    """Yield (index, id, label, pixels) per record.

    A corrupt record raises DataError when reached; earlier records are
    unaffected, so callers can implement skip-and-record policies.
    """
    header = read_container_header(path)
    start = header["_payload_start"]
    with open(path, "rb") as f:
        for i, rec in enumerate(header["records"]):
            f.seek(start + rec["offset"])
            blob = f.read(rec["nbytes"])
            if len(blob) != rec["nbytes"]:
                raise DataError(f"{path}: record {i} truncated")
            if rec["compression"] == "zlib":
                try:
                    blob = zlib.decompress(blob)
                except zlib.error as e:
                    raise DataError(f"{path}: record {i} corrupt: {e}") from e
            shape = tuple(rec["shape"])
            expected = int(np.prod(shape)) * 4
            if len(blob) != expected:
                raise DataError(
                    f"{path}: record {i} has {len(blob)} payload bytes, expected {expected}"
                )
            pix = np.frombuffer(blob, dtype="<f4").reshape(shape)
            if not np.all(np.isfinite(pix)) or pix.min() < 0.0 or pix.max() > 1.0:
                raise DataError(f"{path}: record {i} pixels invalid (non-finite or out of range)")
            yield i, rec["id"], int(rec["label"]), pix.astype(np.float32)


def load_container(path) -> ImageBatch:
    header = read_container_header(path)
    pixels, labels = [], []
    for _, _, label, pix in iter_records(path):
        pixels.append(pix)
        labels.append(label)
    if not pixels:
        raise DataError(f"{path}: container holds no records")
    provenance = GENERATED if header["provenance"] == "generated" else REAL
    return make_batch(
        np.stack(pixels), labels, provenance, source_id=header.get("source_id", str(path))
    )


def verify_container(path) -> dict:
    """Validate a container end to end; returns a summary report dict."""
    header = read_container_header(path)
    errors = []
    count = 0
    shapes = set()
    num_classes = header.get("num_classes")
    it = iter_records(path)
    for i in range(header["count"]):
        try:
            _, _, label, pix = next(it)
        except StopIteration:
            errors.append(f"record {i}: missing")
            break
        except DataError as e:
            errors.append(str(e))
            continue
        shapes.add(pix.shape)
        if num_classes is not None and label >= num_classes:
            errors.append(f"record {i}: label {label} >= num_classes {num_classes}")
        count += 1
    if len(shapes) > 1:
        errors.append(f"mixed image shapes: {sorted(shapes)}")
    return {
        "path": str(path),
        "count": count,
        "declared_count": header["count"],
        "provenance": header["provenance"],
        "num_classes": num_classes,
        "ok": not errors and count == header["count"],
        "errors": errors,
    }


# ---------------------------------------------------------------------------
# Directory / container loading
# ---------------------------------------------------------------------------


def _load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype == np.uint8:
        return (arr.astype(np.float32) / 255.0).clip(0.0, 1.0)
    if arr.dtype == np.uint16:
        # 16-bit inputs rescale so the full code range maps onto [0, 1].
        return (arr.astype(np.float32) / 65535.0).clip(0.0, 1.0)
    arr = arr.astype(np.float32)
    if arr.max() > 1.0:
        raise DataError(f"{path}: unsupported pixel encoding (dtype {arr.dtype})")
    return arr.clip(0.0, 1.0)


def _iter_directory(root: Path, provenance: int, batch_size: int, seed: int) -> Iterator[ImageBatch]:
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"{root}: expected class subdirectories with images")
    entries = []
    skipped = []
    for label, cdir in enumerate(classes):
        for img in sorted(cdir.iterdir()):
            if img.suffix in _PNG_SUFFIXES:
                entries.append((img, label))
    if not entries:
        raise DataError(f"{root}: no images found under class subdirectories")
    order = np.random.default_rng(seed).permutation(len(entries))
    pixels, labels = [], []
    for idx in order:
        img, label = entries[idx]
        try:
            pixels.append(_load_png(img))
        except (OSError, DataError):
            skipped.append(str(img))
            continue
        labels.append(label)
        if len(pixels) == batch_size:
            yield make_batch(np.stack(pixels), labels, provenance, source_id=str(root))
            pixels, labels = [], []
    if pixels:
        yield make_batch(np.stack(pixels), labels, provenance, source_id=str(root))


def _load_stream(descriptor, provenance: int, batch_size: int, seed: int) -> Iterator[ImageBatch]:
    if isinstance(descriptor, ImageBatch):
        yield from as_batches(descriptor, batch_size)
        return
    path = Path(descriptor)
    if path.is_dir():
        yield from _iter_directory(path, provenance, batch_size, seed)
        return
    if not path.exists():
        raise DataError(f"{path}: data source not found")
    header = read_container_header(path)
    declared = GENERATED if header["provenance"] == "generated" else REAL
    if declared != provenance:
        raise DataError(
            f"{path}: container is flagged {header['provenance']!r}, "
            f"expected {'generated' if provenance == GENERATED else 'real'}"
        )
    batch = load_container(path)
    yield from as_batches(batch, batch_size)


def load_real(descriptor, batch_size: int = 64, seed: int = 0) -> Iterator[ImageBatch]:
    """Stream real images as provenance-flagged batches in a seeded order."""
    return _load_stream(descriptor, REAL, batch_size, seed)


def load_generated(descriptor, batch_size: int = 64, seed: int = 0) -> Iterator[ImageBatch]:
    """Stream generated images; labels are mandatory (class-conditional samples)."""
    return _load_stream(descriptor, GENERATED, batch_size, seed)


@dataclass
class DataSources:
    """Descriptors for the real and generated training streams."""

    real: object
    generated: object
    num_classes: int
    seed: int = 0

    def load(self) -> "InMemoryData":
        real = _collect(self.real, REAL, self.seed)
        gen = _collect(self.generated, GENERATED, self.seed)
        if real.image_shape != gen.image_shape:
            raise DataError(
                f"real and generated image shapes differ: {real.image_shape} vs {gen.image_shape}"
            )
        bad = max(int(real.labels.max()), int(gen.labels.max()))
        if bad >= self.num_classes:
            raise DataError(f"label {bad} out of range for num_classes={self.num_classes}")
        return InMemoryData(real, gen, self.num_classes)


def _collect(descriptor, provenance: int, seed: int) -> ImageBatch:
    batches = list(_load_stream(descriptor, provenance, batch_size=4096, seed=seed))
    if not batches:
        raise DataError("empty data source")
    out = batches[0]
    for b in batches[1:]:
        out = concat_batches(out, b)
    return out


@dataclass
class InMemoryData:
    real: ImageBatch
    generated: ImageBatch
    num_classes: int

    def sample(self, which: str, iteration: int, batch_size: int, seed: int) -> ImageBatch:
        """Deterministic per-iteration batch: a pure function of (seed, which, iteration)."""
        src = self.real if which == "real" else self.generated
        if batch_size > src.n:
            raise DataError(f"batch_size {batch_size} exceeds {which} set size {src.n}")
        rng = np.random.default_rng([seed, 0 if which == "real" else 1, iteration])
        idx = rng.choice(src.n, size=batch_size, replace=False)
        return ImageBatch(
            src.pixels[idx], src.labels[idx],
            None if src.provenance is None else src.provenance[idx],
            attacked=False, source_id=src.source_id,
        )


# ---------------------------------------------------------------------------
# Toy data
# ---------------------------------------------------------------------------


def toy_generator(kind: str, params: dict, seed: int) -> tuple:
    """Produce paired (real, generated) toy sets as two ImageBatches.

    ``gaussian2class`` draws class-conditioned Gaussian intensity blobs as
    real images; the generated stream adds a uniform intensity shift and
    optional blur. ``degraded_real`` draws class-oriented striped textures
    as real images and emits blurred+noised copies as the generated
    stream. Use ``as_batches`` to turn either set into a stream.
    """
    if kind == "gaussian2class":
        return _toy_gaussian(params, seed)
    if kind == "degraded_real":
        return _toy_degraded(params, seed)
    raise ConfigurationError(f"unknown toy kind {kind!r}")


def _blob_grid(size: int):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return x / (size - 1), y / (size - 1)


def _toy_gaussian(params: dict, seed: int) -> tuple:
    size = int(params.get("image_size", 8))
    classes = int(params.get("num_classes", 2))
    n = int(params.get("n_per_class", 100))
    noise = float(params.get("noise_sigma", 0.02))
    shift = float(params.get("intensity_shift", 0.0))
    blur = float(params.get("blur_sigma", 0.0))
    rng = np.random.default_rng(seed)

    xg, yg = _blob_grid(size)
    centers = [(0.25 + 0.5 * (c % 2), 0.25 + 0.5 * ((c // 2) % 2)) for c in range(classes)]

    def draw(shift_by: float, blur_by: float):
        pixels = np.empty((n * classes, size, size, 1), dtype=np.float64)
        labels = np.empty(n * classes, dtype=np.int64)
        i = 0
        for c in range(classes):
            cx, cy = centers[c]
            for _ in range(n):
                amp = 0.25 + 0.05 * rng.standard_normal()
                img = 0.45 + amp * np.exp(-(((xg - cx) ** 2 + (yg - cy) ** 2) / 0.02))
                img += noise * rng.standard_normal((size, size))
                if blur_by > 0:
                    img = ndimage.gaussian_filter(img, blur_by)
                pixels[i, :, :, 0] = img + shift_by
                labels[i] = c
                i += 1
        return np.clip(pixels, 0.0, 1.0).astype(np.float32), labels

    real_px, real_y = draw(0.0, 0.0)
    gen_px, gen_y = draw(shift, blur)
    return (
        make_batch(real_px, real_y, REAL, source_id="toy:gaussian2class"),
        make_batch(gen_px, gen_y, GENERATED, source_id="toy:gaussian2class"),
    )


def _toy_degraded(params: dict, seed: int) -> tuple:
    size = int(params.get("image_size", 16))
    classes = int(params.get("num_classes", 3))
    n = int(params.get("n_per_class", 120))
    blur = float(params.get("blur_sigma", 1.0))
    noise = float(params.get("noise_sigma", 0.05))
    freq = float(params.get("frequency", 3.0))
    rng = np.random.default_rng(seed)

    xg, yg = _blob_grid(size)
    total = n * classes
    real = np.empty((total, size, size, 1), dtype=np.float64)
    labels = np.empty(total, dtype=np.int64)
    i = 0
    for c in range(classes):
        theta = np.pi * c / classes
        u = np.cos(theta) * xg + np.sin(theta) * yg
        for _ in range(n):
            amp = 0.22 + 0.04 * rng.standard_normal()
            phase = rng.uniform(0, 2 * np.pi)
            f = freq * (1.0 + 0.05 * rng.standard_normal())
            img = 0.5 + amp * np.sin(2 * np.pi * f * u + phase)
            img += 0.01 * rng.standard_normal((size, size))
            real[i, :, :, 0] = img
            labels[i] = c
            i += 1

    degraded = np.empty_like(real)
    for j in range(total):
        img = ndimage.gaussian_filter(real[j, :, :, 0], blur)
        img = img + noise * rng.standard_normal((size, size))
        degraded[j, :, :, 0] = img

    real = np.clip(real, 0.0, 1.0).astype(np.float32)
    degraded = np.clip(degraded, 0.0, 1.0).astype(np.float32)
    return (
        make_batch(real, labels, REAL, source_id="toy:degraded_real"),
        make_batch(degraded, labels.copy(), GENERATED, source_id="toy:degraded_real"),
    )

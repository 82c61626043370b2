"""Synthetic eye/mouth dataset, MAFT tensor files, and classification metrics."""

from __future__ import annotations

import csv
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Rng, Tensor

NON_DROWSY, DROWSY = 0, 1
EYES, MOUTH = 0, 1
OCCLUDER_VALUE = 0.5


class FormatError(ValueError):
    """A tensor file or dataset directory is malformed."""


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings.

    Rows ``eye_rows`` and ``mouth_rows`` (half-open) hold the two
    discriminative regions. Either region alone determines the label.
    """

    count: int = 512
    seed: int = 0
    image_size: int = 48
    eye_rows: tuple[int, int] = (0, 16)
    mouth_rows: tuple[int, int] = (32, 48)
    occlusion: float = 0.0
    noise_std: float = 0.1
    brightness: tuple[float, float] = (0.3, 0.7)
    jitter: int = 3
    closed_eye_contrast: float = 0.12
    open_eye_contrast: float = 0.35
    yawn_contrast: float = 0.3
    closed_mouth_contrast: float = 0.3

    def validate(self) -> "SynthSpec":
        n = self.image_size
        (e0, e1), (m0, m1) = self.eye_rows, self.mouth_rows
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not (0 <= e0 < e1 <= n and 0 <= m0 < m1 <= n):
            raise ValueError(f"regions {self.eye_rows}/{self.mouth_rows} must lie inside {n} rows")
        if e1 > m0 and m1 > e0:
            raise ValueError("eye and mouth regions overlap")
        if min(e1 - e0, m1 - m0) < 12 or n < 24:
            raise ValueError("regions too small to hold the planted patterns")
        if not 0.0 <= self.occlusion <= 1.0:
            raise ValueError("occlusion probability must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        return self


@dataclass(frozen=True)
class Sample:
    image: Tensor  # 1 x H x W, values in [0, 1]
    label: int
    occluded: bool
    region: int = -1  # occluded region (EYES / MOUTH), -1 when clean


def _disc(yy, xx, cy, cx, radius):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius


def _bar(yy, xx, cy, cx, half_h, half_w):
    return (np.abs(yy - cy) <= half_h) & (np.abs(xx - cx) <= half_w)


def _render(spec: SynthSpec, label: int, rng: Rng) -> np.ndarray:
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    base = spec.brightness[0] + (spec.brightness[1] - spec.brightness[0]) * rng.uniform()
    img = np.full((n, n), base)
    j = spec.jitter
    dy, dx = rng.integers(-j, j + 1, size=2)

    e0, e1 = spec.eye_rows
    ey = (e0 + e1) / 2 + dy
    for cx in (n * 0.3 + dx, n * 0.7 + dx):
        if label == DROWSY:
            # closed eye: faint horizontal slit
            img[_bar(yy, xx, ey, cx, 1, 5)] = base - spec.closed_eye_contrast
        else:
            img[_disc(yy, xx, ey, cx, 4)] = base - spec.open_eye_contrast

    m0, m1 = spec.mouth_rows
    my = (m0 + m1) / 2 - dy
    mx = n / 2 - dx
    if label == DROWSY:
        img[_disc(yy, xx, my, mx, 5)] = base + spec.yawn_contrast
    else:
        img[_bar(yy, xx, my, mx, 1, 8)] = base - spec.closed_mouth_contrast

    img += rng.normal((n, n), std=spec.noise_std)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SynthSpec) -> list[Sample]:
    """Balanced, seeded set of planted-pattern faces with optional occlusion."""
    spec.validate()
    root = Rng(spec.seed)
    labels = np.arange(spec.count) % 2
    labels = labels[root.split(0).permutation(spec.count)]
    occ_rng = root.split(1)
    occluded = occ_rng.uniform(spec.count) < spec.occlusion
    regions = occ_rng.integers(0, 2, size=spec.count)

    samples = []
    for i in range(spec.count):
        label = int(labels[i])
        img = _render(spec, label, root.split(2, i))
        region = -1
        if occluded[i]:
            region = int(regions[i])
            r0, r1 = spec.eye_rows if region == EYES else spec.mouth_rows
            img[r0:r1, :] = OCCLUDER_VALUE
        samples.append(Sample(Tensor(img[None]), label, bool(occluded[i]), region))
    return samples


def mean_threshold_accuracy(samples: Sequence[Sample]) -> float:
    """Best accuracy of any threshold rule on the image mean (either polarity)."""
    means = np.array([s.image.data.mean() for s in samples])
    labels = np.array([s.label for s in samples])
    order = np.argsort(means)
    sorted_labels = labels[order]
    n = len(samples)
    # predict 1 above the cut: correct = zeros below + ones above
    zeros_below = np.concatenate([[0], np.cumsum(sorted_labels == 0)])
    ones_above = np.concatenate([np.cumsum((sorted_labels == 1)[::-1])[::-1], [0]])
    best = (zeros_below + ones_above).max() / n
    return float(max(best, 1.0 - (zeros_below + ones_above).min() / n))


def stack_images(samples: Sequence[Sample]) -> Tensor:
    return Tensor(np.stack([s.image.data for s in samples]))


# ---------------------------------------------------------------------------
# MAFT tensor files
# ---------------------------------------------------------------------------

MAGIC = b"MAFT"
VERSION = 1
DTYPE_F64LE = 1
_HEADER = struct.Struct("<4sBBB")


def encode_tensor(t: Tensor | np.ndarray) -> bytes:
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if data.ndim > 255:
        raise ValueError("MAFT supports at most 255 dimensions")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F64LE, data.ndim)
    dims = struct.pack(f"<{data.ndim}I", *data.shape)
    return header + dims + np.ascontiguousarray(data, dtype="<f8").tobytes()


def decode_tensor(blob: bytes) -> Tensor:
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated MAFT header: {len(blob)} bytes, need {_HEADER.size}")
    magic, version, dtype, ndim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported MAFT version {version}")
    if dtype != DTYPE_F64LE:
        raise FormatError(f"unsupported dtype code {dtype}")
    dims_end = _HEADER.size + 4 * ndim
    if len(blob) < dims_end:
        raise FormatError(f"truncated MAFT dims: {len(blob)} bytes, need {dims_end}")
    shape = struct.unpack_from(f"<{ndim}I", blob, _HEADER.size)
    expected = dims_end + 8 * int(np.prod(shape, dtype=np.int64))
    if len(blob) != expected:
        raise FormatError(f"MAFT payload size mismatch: file has {len(blob)} bytes, header implies {expected}")
    data = np.frombuffer(blob, dtype="<f8", offset=dims_end).reshape(shape)
    return Tensor(data.astype(np.float64))


def save_tensor(path: str | os.PathLike, t: Tensor | np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path: str | os.PathLike) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

MANIFEST = "manifest.csv"


def write_dataset(directory: str | os.PathLike, samples: Sequence[Sample]) -> Path:
    """Write ``images/NNNNNN.maft`` plus ``manifest.csv``; replaces ``directory`` atomically."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        (tmp / "images").mkdir()
        with open(tmp / MANIFEST, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path", "label", "occluded"])
            for i, s in enumerate(samples):
                rel = f"images/{i:06d}.maft"
                save_tensor(tmp / rel, s.image)
                writer.writerow([rel, s.label, "true" if s.occluded else "false"])
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def read_dataset(directory: str | os.PathLike) -> tuple[list[Sample], list[str]]:
    """Samples and their manifest paths, in manifest order."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    samples, paths = [], []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "label", "occluded"]:
            raise FormatError(f"manifest header must be path,label,occluded; got {reader.fieldnames}")
        for row in reader:
            image = load_tensor(directory / row["path"])
            if image.ndim == 2:
                image = Tensor(image.data[None])
            samples.append(Sample(image, int(row["label"]), row["occluded"] == "true"))
            paths.append(row["path"])
    if not samples:
        raise FormatError(f"{manifest} lists no samples")
    return samples, paths


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check_pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(f"preds and labels must be equal-length lists, got {preds.shape} and {labels.shape}")
    if preds.size == 0:
        raise ValueError("metrics need at least one prediction")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _check_pair(preds, labels)
    return float(np.count_nonzero(preds == labels) / preds.size)


def f1_score(preds, labels, positive_class: int = DROWSY) -> float:
    """F1 of ``positive_class``; defined as 0 when there are no true positives."""
    preds, labels = _check_pair(preds, labels)
    pp, lp = preds == positive_class, labels == positive_class
    tp = np.count_nonzero(pp & lp)
    if tp == 0:
        return 0.0
    fp = np.count_nonzero(pp & ~lp)
    fn = np.count_nonzero(~pp & lp)
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return float(2 * precision * recall / (precision + recall))

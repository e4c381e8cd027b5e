"""Spike-train datasets: encoders, a synthetic benchmark, and file storage.

Samples are stored sample-major as (n, T, C, H, W) float32 and served to the
network time-major as (T, batch, C, H, W).  Two encoders cover the common
cases: Poisson rate coding (binary spikes, one Bernoulli draw per pixel per
step) and direct coding (the frame repeated T times, real-valued).

The on-disk container is a little-endian binary format (magic "SPKD"): a
JSON geometry header, uint32 labels, float32 payload, CRC32 footer.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "poisson_encode",
    "direct_encode",
    "synth_two_class",
    "save_images",
    "load_images",
    "DataFormatError",
    "MagicError",
    "TruncationError",
    "ChecksumError",
]

_f32 = np.float32

CONTAINER_MAGIC = b"SPKD"
CONTAINER_VERSION = 1


class DataFormatError(IOError):
    """A sample container cannot be read."""


class MagicError(DataFormatError):
    """The file does not start with the container magic."""


class TruncationError(DataFormatError):
    """The file ends before its declared contents do."""


class ChecksumError(DataFormatError):
    """The container's CRC32 does not match its contents."""


@dataclass
class Dataset:
    """Encoded samples with labels; immutable in spirit, sliced by batches()."""

    samples: np.ndarray  # (n, T, C, H, W) float32
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        if self.samples.ndim != 5:
            raise ValueError(f"samples must be (n, T, C, H, W), got {self.samples.shape}")
        if self.labels.shape != (self.samples.shape[0],):
            raise ValueError(
                f"{self.samples.shape[0]} samples but {self.labels.shape} labels"
            )
        if self.num_classes < 2:
            raise ValueError(f"need at least two classes, got {self.num_classes}")
        if self.labels.size and not (
            (self.labels >= 0).all() and (self.labels < self.num_classes).all()
        ):
            raise ValueError("labels out of range for num_classes")
        self.samples = np.ascontiguousarray(self.samples, dtype=_f32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def t_steps(self) -> int:
        return self.samples.shape[1]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return self.samples.shape[2:]

    def batches(self, batch_size: int, shuffle: bool = False, seed: int = 0):
        """Yield (x, y) with x time-major (T, b, C, H, W); includes the tail."""
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        order = np.arange(len(self))
        if shuffle:
            np.random.default_rng(seed).shuffle(order)
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            x = self.samples[idx].transpose(1, 0, 2, 3, 4)
            yield np.ascontiguousarray(x), self.labels[idx]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes, self.split)


def poisson_encode(images: np.ndarray, t_steps: int, seed: int = 0) -> np.ndarray:
    """Rate-code intensities in [0, 1]: each pixel spikes i.i.d. per step.

    Returns (n, T, C, H, W) binary float32.
    """
    images = np.asarray(images, dtype=_f32)
    if images.ndim != 4:
        raise ValueError(f"images must be (n, C, H, W), got {images.shape}")
    if t_steps < 1:
        raise ValueError(f"t_steps must be >= 1, got {t_steps}")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ValueError("rate coding needs intensities in [0, 1]")
    rng = np.random.default_rng(seed)
    draws = rng.random((images.shape[0], t_steps, *images.shape[1:]))
    return (draws < images[:, None]).astype(_f32)


def direct_encode(images: np.ndarray, t_steps: int) -> np.ndarray:
    """Repeat each frame T times unchanged (real-valued stream)."""
    images = np.asarray(images, dtype=_f32)
    if images.ndim != 4:
        raise ValueError(f"images must be (n, C, H, W), got {images.shape}")
    if t_steps < 1:
        raise ValueError(f"t_steps must be >= 1, got {t_steps}")
    return np.repeat(images[:, None], t_steps, axis=1)


def synth_two_class(
    n: int,
    t_steps: int = 8,
    seed: int = 0,
    hw: int = 4,
    burst_rate: float = 0.9,
    background_rate: float = 0.05,
    split: str = "train",
) -> Dataset:
    """A two-class spike-train problem that pooling alone cannot solve.

    Both classes emit the same expected number of spikes; they differ only in
    WHERE and WHEN channel 0 bursts.  Class 0 bursts in the top-left quadrant
    during the first half of the window, class 1 in the bottom-right quadrant
    during the second half.  Global average pooling of the time-summed input
    therefore carries (nearly) no class signal; separating the classes needs
    spatial features, which the network body has to learn.  Channel 1 is pure
    background noise either way.

    Each sample is resampled until its burst quadrant actually carries more
    spikes than the opposite one inside the class window, so every sample is
    individually decodable.
    """
    if hw % 2:
        raise ValueError(f"spatial size must be even, got {hw}")
    if t_steps < 2:
        raise ValueError(f"need at least two steps for an early/late code, got {t_steps}")
    rng = np.random.default_rng(seed)
    half_t = t_steps // 2
    q = hw // 2
    samples = np.zeros((n, t_steps, 2, hw, hw), dtype=_f32)
    labels = (np.arange(n) % 2).astype(np.int64)
    rng.shuffle(labels)
    for i in range(n):
        label = labels[i]
        for _ in range(64):
            x = (rng.random((t_steps, 2, hw, hw)) < background_rate).astype(_f32)
            if label == 0:
                window, rows, cols = slice(0, half_t), slice(0, q), slice(0, q)
                other_rows, other_cols = slice(q, hw), slice(q, hw)
            else:
                window, rows, cols = slice(half_t, t_steps), slice(q, hw), slice(q, hw)
                other_rows, other_cols = slice(0, q), slice(0, q)
            burst = rng.random((half_t, q, q)) < burst_rate
            x[window, 0, rows, cols] = np.maximum(x[window, 0, rows, cols], burst)
            own = x[window, 0, rows, cols].sum()
            other = x[window, 0, other_rows, other_cols].sum()
            if own >= other + q * q:
                samples[i] = x
                break
        else:
            raise RuntimeError("failed to draw a decodable sample; rates too close")
    return Dataset(samples, labels, num_classes=2, split=split)


# ---- container -------------------------------------------------------------


def save_images(path, dataset: Dataset) -> None:
    """Write a dataset to the SPKD container format."""
    n, t, c, h, w = dataset.samples.shape
    header = json.dumps(
        {
            "format_version": CONTAINER_VERSION,
            "n": n,
            "t_steps": t,
            "channels": c,
            "height": h,
            "width": w,
            "num_classes": dataset.num_classes,
            "split": dataset.split,
        }
    ).encode("utf-8")
    body = bytearray()
    body += struct.pack("<H", CONTAINER_VERSION)
    body += struct.pack("<I", len(header))
    body += header
    body += dataset.labels.astype("<u4").tobytes()
    body += dataset.samples.astype("<f4", copy=False).tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def load_images(path) -> Dataset:
    """Read an SPKD container, verifying magic, length, and checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CONTAINER_MAGIC:
        raise MagicError(f"{path}: not a sample container (bad magic)")
    if len(blob) < 14:
        raise TruncationError(f"{path}: too short to hold a header")
    body = blob[4:-4]
    version = struct.unpack("<H", body[:2])[0]
    if version != CONTAINER_VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")
    header_len = struct.unpack("<I", body[2:6])[0]
    if 6 + header_len > len(body):
        raise TruncationError(f"{path}: header runs past end of file")
    try:
        header = json.loads(body[6 : 6 + header_len].decode("utf-8"))
        n, t = header["n"], header["t_steps"]
        c, h, w = header["channels"], header["height"], header["width"]
    except (ValueError, KeyError) as exc:
        raise DataFormatError(f"{path}: unreadable container header ({exc})") from exc
    off = 6 + header_len
    labels_bytes = 4 * n
    payload_bytes = 4 * n * t * c * h * w
    if off + labels_bytes + payload_bytes != len(body):
        raise TruncationError(
            f"{path}: payload length mismatch (expected {labels_bytes + payload_bytes} "
            f"bytes after header, found {len(body) - off})"
        )
    crc_stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt")
    labels = np.frombuffer(body, dtype="<u4", count=n, offset=off).astype(np.int64)
    samples = (
        np.frombuffer(body, dtype="<f4", count=n * t * c * h * w, offset=off + labels_bytes)
        .reshape(n, t, c, h, w)
        .astype(_f32)
    )
    return Dataset(samples, labels, header["num_classes"], header.get("split", "train"))

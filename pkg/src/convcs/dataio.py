"""Dataset loading (IDX), image/metric serialization, and PSNR.

IDX files are big-endian: u32 magic (0x00000803 for images, 0x00000801 for
labels), one u32 per dimension, then raw bytes. Pixels are scaled to
[0, 1] on load by dividing by 255.
"""

import csv
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# PSNR values written to CSV are capped here; identical images report +inf
# from psnr() itself.
PSNR_CAP_DB = 99.0


@dataclass
class Dataset:
    images: np.ndarray          # (N, H, W, 1) float64 in [0, 1]
    labels: np.ndarray = None   # (N,) int64 or None
    source: str = ""

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ValueError(
                f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self):
        return len(self.images)


class IdxParseError(ValueError):
    pass


def _read_idx(path, expected_magic, what):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise IdxParseError(f"{path}: truncated header ({len(data)} bytes)")
    magic, count = struct.unpack_from(">II", data, 0)
    if magic != expected_magic:
        raise IdxParseError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, expected "
            f"0x{expected_magic:08x} ({what})")
    ndim_extra = 2 if expected_magic == IDX_IMAGE_MAGIC else 0
    header = 8 + 4 * ndim_extra
    if len(data) < header:
        raise IdxParseError(f"{path}: truncated dimension table at offset 8")
    dims = struct.unpack_from(f">{ndim_extra}I", data, 8) if ndim_extra else ()
    total = count * int(np.prod(dims)) if dims else count
    if len(data) - header < total:
        raise IdxParseError(
            f"{path}: expected {total} data bytes at offset {header}, "
            f"found {len(data) - header}")
    raw = np.frombuffer(data, dtype=np.uint8, count=total, offset=header)
    return raw.reshape((count,) + dims), count


def load_idx(images_path, labels_path=None):
    """Load an IDX image file (and optional label file) into a Dataset."""
    raw, count = _read_idx(images_path, IDX_IMAGE_MAGIC, "images")
    images = raw.astype(np.float64)[..., None] / 255.0
    labels = None
    if labels_path is not None:
        lab, lab_count = _read_idx(labels_path, IDX_LABEL_MAGIC, "labels")
        if lab_count != count:
            raise IdxParseError(
                f"{labels_path}: {lab_count} labels but {images_path} has "
                f"{count} images")
        labels = lab.astype(np.int64)
    return Dataset(images=images, labels=labels, source=str(images_path))


def write_idx_images(images_u8, path):
    """Write a (N, H, W) uint8 stack as an IDX image file."""
    arr = np.asarray(images_u8, dtype=np.uint8)
    n, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(arr.tobytes(order="C"))


def write_idx_labels(labels, path):
    arr = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, arr.shape[0]))
        fh.write(arr.tobytes(order="C"))


def psnr(reference, estimate, peak=1.0):
    """10 log10(peak^2 / MSE) in dB; +inf for identical inputs."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {est.shape}")
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def save_image_pgm(image, path):
    """Write a single-channel [0, 1] image as binary PGM (P5, maxval 255).

    Quantization is round-half-up on v*255, clamped to [0, 255].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim != 2:
        raise ValueError(f"PGM output needs a single-channel image, got {img.shape}")
    quant = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(quant.tobytes(order="C"))


def load_image_pgm(path):
    """Read a binary PGM written by save_image_pgm back to [0, 1] floats."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (header {fields[0]!r})")
    width, height, maxval = (int(f) for f in fields[1:4])
    pos += 1
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return raw.reshape(height, width).astype(np.float64) / maxval


def write_metrics_csv(rows, path, fieldnames=None):
    """Write metric records as CSV; infinite PSNR values are capped.

    rows: sequence of dicts. fieldnames defaults to the keys of the first
    row (or must be given for an empty sequence to emit a header-only file).
    """
    rows = list(rows)
    if fieldnames is None:
        if not rows:
            raise ValueError("fieldnames required when rows is empty")
        fieldnames = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key, value in out.items():
                if isinstance(value, float) and "psnr" in key.lower():
                    out[key] = min(value, PSNR_CAP_DB)
            writer.writerow(out)

"""On-disk formats: 8-bit binary PGM images/masks, raw float32 probability
maps ("PMAP"), and the CSV dataset manifest.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataFormatError
from .synth import Sample

PMAP_MAGIC = b"PMAP"
PMAP_VERSION = 1
MANIFEST_COLUMNS = ["id", "image_path", "mask_path", "patient_id", "view_tag",
                    "spacing_row_mm", "spacing_col_mm"]


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255)


def write_image_pgm(path, image: np.ndarray) -> None:
    """Store intensities in [0, 1] as round(255 * value)."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise DataFormatError(f"PGM images are 2-D, got shape {arr.shape}")
    px = np.rint(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    _write_pgm(path, px)


def write_mask_pgm(path, mask: np.ndarray) -> None:
    arr = np.asarray(mask)
    if not np.all(np.isin(arr, (0, 1))):
        raise DataFormatError("mask PGM expects values in {0, 1}")
    _write_pgm(path, (arr * 255).astype(np.uint8))


def _write_pgm(path, px: np.ndarray) -> None:
    h, w = px.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(px.tobytes())


def _read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise DataFormatError(f"{path}: not a binary PGM (P5) file")
    # tokenize the header, skipping '#' comments
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos] in b" \t\r\n":
            pos += 1
        if pos >= len(data):
            raise DataFormatError(f"{path}: truncated PGM header")
        if data[pos] == ord("#"):
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in b" \t\r\n":
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataFormatError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise DataFormatError(f"{path}: PGM maxval must be 255, got {maxval}")
    payload = data[pos:pos + w * h]
    if len(payload) != w * h:
        raise DataFormatError(f"{path}: PGM payload truncated")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def read_image_pgm(path) -> np.ndarray:
    return (_read_pgm(path).astype(np.float32) / 255.0)


def read_mask_pgm(path) -> np.ndarray:
    px = _read_pgm(path)
    if not np.all(np.isin(px, (0, 255))):
        raise DataFormatError(f"{path}: mask PGM must contain only 0 and 255")
    return (px == 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# PMAP: 16-byte header (magic, u32 version, u32 height, u32 width) + f32 LE


def write_pmap(path, prob_map: np.ndarray) -> None:
    arr = np.asarray(prob_map, dtype=np.float32)
    if arr.ndim != 2:
        raise DataFormatError(f"PMAP stores 2-D maps, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(PMAP_MAGIC)
        f.write(struct.pack("<III", PMAP_VERSION, h, w))
        f.write(arr.astype("<f4").tobytes())


def read_pmap(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != PMAP_MAGIC:
        raise DataFormatError(f"{path}: not a PMAP file")
    version, h, w = struct.unpack("<III", data[4:16])
    if version != PMAP_VERSION:
        raise DataFormatError(f"{path}: unsupported PMAP version {version}")
    payload = data[16:]
    if len(payload) != 4 * h * w:
        raise DataFormatError(f"{path}: PMAP payload size mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class ManifestEntry:
    sample_id: str
    image_path: str  # relative to the manifest's directory
    mask_path: str
    patient_id: str
    view_tag: str
    spacing: tuple[float, float]


def write_manifest(path, entries) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for e in entries:
            writer.writerow([e.sample_id, e.image_path, e.mask_path, e.patient_id,
                             e.view_tag, f"{e.spacing[0]:.6f}", f"{e.spacing[1]:.6f}"])


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"manifest not found: {path}")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty manifest") from None
        if header != MANIFEST_COLUMNS:
            raise DataFormatError(
                f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise DataFormatError(f"{path}:{lineno}: wrong column count")
            try:
                spacing = (float(row[5]), float(row[6]))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad spacing") from exc
            entries.append(ManifestEntry(row[0], row[1], row[2], row[3],
                                         row[4], spacing))
    return entries


def load_sample(entry: ManifestEntry, base_dir) -> Sample:
    base = Path(base_dir)
    image = read_image_pgm(base / entry.image_path)
    mask = read_mask_pgm(base / entry.mask_path)
    if image.shape != mask.shape:
        raise DataFormatError(
            f"{entry.sample_id}: image {image.shape} and mask {mask.shape} differ")
    return Sample(image=image, mask=mask, spacing=entry.spacing,
                  patient_id=entry.patient_id, view_tag=entry.view_tag)

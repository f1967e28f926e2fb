"""Netpbm images and the on-disk dataset layout.

A dataset directory holds::

    manifest.txt        header lines, then one record per sample
    images/NNNN.ppm     binary pixmap (P6, maxval 255)
    dots/NNNN.txt       one "x y" line per annotated person

The manifest starts with ``crowdcount-dataset 1``, ``stride <n>`` and
``samples <n>``; each record is ``<id> <image> <dots> <count>``. Readers
validate everything before returning, so a malformed directory never yields
a partial list.
"""

import logging

from pathlib import Path
from typing import List, Tuple

import numpy as np

from .errors import ContractError, DatasetIOError, ParseError
from .synth import CrowdSample, bin_dots

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
MANIFEST_HEADER = "crowdcount-dataset 1"


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read {path}: {e}") from e


def _write_bytes(path, blob: bytes):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as e:
        raise DatasetIOError(f"cannot write {path}: {e}") from e


# --- netpbm ---

def _header_fields(path, blob: bytes, count: int) -> Tuple[List[bytes], int]:
    """Splits the first ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the raster (one whitespace byte past the last token).
    """

    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            end = blob.find(b"\n", pos)
            pos = len(blob) if end < 0 else end + 1
            continue
        if pos >= len(blob):
            raise ParseError(path, pos, "truncated header")
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ParseError(path, pos, "header must end with a single whitespace byte")
    return tokens, pos + 1


def _parse_netpbm(path, blob: bytes, magics: Tuple[bytes, ...]):
    fields, offset = _header_fields(path, blob, 4)
    magic = fields[0]
    if magic not in magics:
        raise ParseError(path, 0, f"expected {' or '.join(m.decode() for m in magics)}, got {magic!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ParseError(path, 2, "width, height and maxval must be integers")
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise ParseError(path, 2, f"invalid dimensions {width}x{height} or maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    raster = blob[offset:]
    if len(raster) < expected:
        raise ParseError(path, len(blob), f"raster truncated: {len(raster)} of {expected} bytes")
    if len(raster) > expected:
        raise ParseError(path, offset + expected, "trailing bytes after raster")
    values = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)
    return values, maxval


def write_ppm(path, image: np.ndarray):
    """Stores a [3, h, w] image in [0, 1] as an 8-bit P6 pixmap."""

    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DatasetIOError(f"PPM needs a [3, h, w] image, got {image.shape}")
    _, h, w = image.shape
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.transpose(1, 2, 0).tobytes())


def read_image(path) -> np.ndarray:
    """Reads a P6 pixmap (or an 8/16-bit P5 graymap, replicated) as [3, h, w] floats in [0, 1]."""

    values, maxval = _parse_netpbm(path, _read_bytes(path), (b"P6", b"P5"))
    image = values.astype(np.float64).transpose(2, 0, 1) / maxval
    return np.repeat(image, 3, axis=0) if image.shape[0] == 1 else image


def write_pgm16(path, values: np.ndarray):
    """Stores a 2-D array of integers in [0, 65535] as a big-endian 16-bit P5 graymap."""

    values = np.asarray(values)
    if values.ndim != 2:
        raise DatasetIOError(f"PGM needs a 2-D array, got {values.shape}")
    if values.size and (values.min() < 0 or values.max() > 65535):
        raise DatasetIOError("PGM values must lie in [0, 65535]")
    h, w = values.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    _write_bytes(path, header + values.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    values, _ = _parse_netpbm(path, _read_bytes(path), (b"P5",))
    return values[:, :, 0].astype(np.int64)


# --- dots ---

def format_dots(dots: np.ndarray) -> str:
    return "".join(f"{int(x)} {int(y)}\n" for x, y in np.asarray(dots).reshape(-1, 2))


def parse_dots(path, blob: bytes) -> np.ndarray:
    dots, offset = [], 0
    for line in blob.splitlines(keepends=True):
        text = line.strip()
        if text:
            parts = text.split()
            try:
                if len(parts) != 2:
                    raise ValueError
                dots.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise ParseError(path, offset, f"expected 'x y', got {text[:40]!r}")
        offset += len(line)
    return np.array(dots, dtype=np.int64).reshape(-1, 2)


# --- dataset directories ---

def write_dataset(path, samples: List[CrowdSample], stride: int):
    """Writes images, dot sidecars and finally the manifest under ``path``."""

    root = Path(path)
    lines = [MANIFEST_HEADER, f"stride {stride}", f"samples {len(samples)}"]
    for index, sample in enumerate(samples):
        sample_id = sample.sample_id or f"{index:04d}"
        image_rel, dots_rel = f"images/{sample_id}.ppm", f"dots/{sample_id}.txt"
        write_ppm(root / image_rel, sample.image)
        _write_bytes(root / dots_rel, format_dots(sample.dots).encode("ascii"))
        lines.append(f"{sample_id} {image_rel} {dots_rel} {sample.count}")
    _write_bytes(root / MANIFEST, ("\n".join(lines) + "\n").encode("ascii"))
    logger.info("wrote %d samples to %s", len(samples), root)


class _Manifest:
    def __init__(self, path, blob: bytes):
        self.path = path
        self.lines = []
        offset = 0
        for raw in blob.splitlines(keepends=True):
            self.lines.append((offset, raw.decode("ascii", errors="replace").strip()))
            offset += len(raw)
        self.end = offset
        self.index = 0

    def next(self, what: str) -> Tuple[int, List[str]]:
        if self.index >= len(self.lines):
            raise ParseError(self.path, self.end, f"truncated manifest: missing {what}")
        offset, text = self.lines[self.index]
        self.index += 1
        return offset, text.split()

    def keyed_int(self, key: str) -> int:
        offset, parts = self.next(key)
        if len(parts) != 2 or parts[0] != key or not parts[1].isdigit():
            raise ParseError(self.path, offset, f"expected '{key} <n>'")
        return int(parts[1])


def read_dataset(path) -> Tuple[List[CrowdSample], int]:
    """Loads every sample listed in the manifest; returns (samples, stride)."""

    root = Path(path)
    manifest_path = root / MANIFEST
    manifest = _Manifest(manifest_path, _read_bytes(manifest_path))

    offset, parts = manifest.next("header")
    if " ".join(parts) != MANIFEST_HEADER:
        raise ParseError(manifest_path, offset, f"expected '{MANIFEST_HEADER}'")
    stride = manifest.keyed_int("stride")
    if stride < 1:
        raise ParseError(manifest_path, manifest.lines[1][0], "stride must be >= 1")
    n = manifest.keyed_int("samples")

    samples = []
    for _ in range(n):
        offset, parts = manifest.next("sample record")
        if len(parts) != 4 or not parts[3].isdigit():
            raise ParseError(manifest_path, offset, "expected '<id> <image> <dots> <count>'")
        sample_id, image_rel, dots_rel, count = parts[0], parts[1], parts[2], int(parts[3])
        image = read_image(root / image_rel)
        dots_path = root / dots_rel
        dots = parse_dots(dots_path, _read_bytes(dots_path))
        if len(dots) != count:
            raise ParseError(manifest_path, offset,
                             f"sample {sample_id} lists {count} persons but {dots_rel} has {len(dots)}")
        _, h, w = image.shape
        try:
            gt = bin_dots(dots, h, w, stride)
        except ContractError as e:
            raise ParseError(dots_path, 0, str(e)) from e
        samples.append(CrowdSample(image, dots, gt, sample_id))
    for offset, text in manifest.lines[manifest.index:]:
        if text:
            raise ParseError(manifest_path, offset, "unexpected records after the last sample")
    return samples, stride

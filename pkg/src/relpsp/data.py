"""Dataset ingestion and checkpoint persistence.

Checkpoint layout (all integers little-endian)::

    b"SNNTCKP1"                       8-byte magic, last byte is the version
    u32 header_len
    header_len bytes of UTF-8 JSON    architecture, thresholds, shapes, ...
    float32 weight blocks             layer order, C-contiguous
    u32 crc32                         over everything between magic and crc
"""
from __future__ import annotations

import gzip
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
DATA_ROOT_ENV = "RELPSP_DATA_ROOT"


class IdxError(ValueError):
    def __init__(self, msg, path=None, offset=None):
        where = f" ({path}" + (f", byte offset {offset}" if offset is not None else "") + ")" if path else ""
        super().__init__(msg + where)
        self.path = path
        self.offset = offset


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file of unsigned bytes (optionally gzipped)."""
    path = Path(path)
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"file is {len(raw)} bytes, too short for the magic number", path, len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise IdxMagicError(f"bad magic 0x{magic:08x}: expected unsigned-byte IDX data", path, 0)
    if expect_magic is not None and magic != expect_magic:
        raise IdxMagicError(f"magic 0x{magic:08x} does not match expected 0x{expect_magic:08x}", path, 0)
    ndim = magic & 0xFF
    if ndim == 0:
        raise IdxDimensionError("IDX file declares zero dimensions", path, 3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"header needs {header} bytes, file has {len(raw)}", path, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if count > 2**40:
        raise IdxDimensionError(f"dimensions {dims} overflow the addressable size", path, 4)
    if len(raw) < header + count:
        raise IdxTruncatedError(
            f"payload truncated: need {count} bytes after header, have {len(raw) - header}",
            path, len(raw))
    if len(raw) > header + count:
        log.warning("%s: %d trailing bytes ignored", path, len(raw) - header - count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


@dataclass
class Dataset:
    images: np.ndarray  # [n, h, w] uint8
    labels: np.ndarray  # [n] int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.split not in ("train", "test", "val"):
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int, seed: int = 0) -> "Dataset":
        """First ``n`` samples of a seeded permutation; the whole set if ``n`` is too large."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return Dataset(self.images[idx], self.labels[idx], self.split)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def resolve_data_dir(path) -> Path:
    """Relative paths are looked up under ``$RELPSP_DATA_ROOT`` when it is set."""
    path = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute() and not path.exists():
        return Path(root) / path
    return path


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, split: str = "train") -> Dataset:
    """MNIST or Fashion-MNIST in the standard IDX file names."""
    directory = resolve_data_dir(directory)
    if split not in _MNIST_FILES:
        raise ValueError(f"MNIST has splits {sorted(_MNIST_FILES)}, not {split!r}")
    img_name, lbl_name = _MNIST_FILES[split]
    images = load_idx(_find(directory, img_name), IDX_IMAGES)
    labels = load_idx(_find(directory, lbl_name), IDX_LABELS)
    if images.ndim != 3:
        raise IdxDimensionError(f"expected [n, h, w] images, got {images.shape}", directory)
    return Dataset(images, labels.astype(np.int64), split)


_IMAGE_EXT = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".pgm", ".ppm"}


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of an ``[..., 3]`` array."""
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def load_image(path, size=(160, 250)) -> np.ndarray:
    """Grayscale uint8 image of ``size`` (height, width), resized bilinearly."""
    from PIL import Image

    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    gray = Image.fromarray(to_grayscale(rgb).astype(np.float32), mode="F")
    gray = gray.resize((size[1], size[0]), Image.BILINEAR)
    return np.clip(np.rint(np.asarray(gray)), 0, 255).astype(np.uint8)


def load_caltech(directory, size=(160, 250), n_train: int = 200, n_val: int = 50,
                 seed: int = 0, classes=None) -> tuple[Dataset, Dataset, Dataset]:
    """Class-per-subdirectory image folders, split per class into train/val/test.

    Each class contributes ``n_train`` and ``n_val`` randomly chosen images and
    the remainder goes to test.  Labels follow the sorted class names unless
    ``classes`` fixes the order.
    """
    directory = resolve_data_dir(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Caltech directory not found: {directory}")
    if classes is None:
        classes = sorted(p.name for p in directory.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"no class subdirectories in {directory}")
    rng = np.random.default_rng(seed)
    parts = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for label, name in enumerate(classes):
        files = sorted(p for p in (directory / name).iterdir() if p.suffix.lower() in _IMAGE_EXT)
        images = []
        for p in files:
            try:
                images.append(load_image(p, size))
            except Exception as exc:  # PIL raises a zoo of types for bad files
                log.warning("skipping unreadable image %s: %s", p, exc)
        if not images:
            raise ValueError(f"class {name!r} in {directory} has no readable images")
        if len(images) < n_train + n_val:
            raise ValueError(f"class {name!r} has {len(images)} images, need at least {n_train + n_val}")
        perm = rng.permutation(len(images))
        cuts = {"train": perm[:n_train], "val": perm[n_train:n_train + n_val], "test": perm[n_train + n_val:]}
        for split, idx in cuts.items():
            parts[split][0].extend(images[i] for i in idx)
            parts[split][1].extend([label] * len(idx))
    out = []
    for split in ("train", "val", "test"):
        imgs, lbls = parts[split]
        arr = np.stack(imgs) if imgs else np.zeros((0,) + tuple(size), np.uint8)
        out.append(Dataset(arr, np.asarray(lbls, dtype=np.int64), split))
    return tuple(out)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SNNTCKP1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    architecture: str
    weights: list
    thresholds: list
    kernel: str = "rel"
    encoder: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)
    step: int = 0
    format_version: int = CKPT_VERSION

    def header(self) -> dict:
        return {
            "format_version": self.format_version,
            "architecture": self.architecture,
            "kernel": self.kernel,
            "thresholds": [float(t) for t in self.thresholds],
            "shapes": [list(w.shape) for w in self.weights],
            "encoder": self.encoder,
            "hyper": self.hyper,
            "step": int(self.step),
        }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    body = bytearray(struct.pack("<I", len(header)))
    body += header
    for w in ckpt.weights:
        body += np.ascontiguousarray(w, dtype="<f4").tobytes()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(body)
        f.write(struct.pack("<I", crc))
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    return _parse_header(raw, path)[0]


def _parse_header(raw: bytes, path):
    if raw[:7] != CKPT_MAGIC[:7]:
        raise CheckpointMagicError(f"{path}: not a checkpoint (magic {raw[:8]!r})")
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointMagicError(f"{path}: unsupported checkpoint version {raw[7:8]!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen + 4 > len(raw):
        raise CheckpointError(f"{path}: header length {hlen} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointChecksumError(f"{path}: header is corrupt ({exc})") from exc
    return header, 12 + hlen


def load_checkpoint(path, architecture: str | None = None) -> Checkpoint:
    """Read and verify a checkpoint; optionally check it fits ``architecture``."""
    from .topology import param_shapes, parse_architecture

    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        _parse_header(raw, path)
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[8:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointChecksumError(f"{path}: CRC32 mismatch, file is corrupt")
    header, pos = _parse_header(raw, path)
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointMagicError(f"{path}: header version {header.get('format_version')} unsupported")
    weights = []
    for shape in header["shapes"]:
        n = math.prod(shape)
        if pos + 4 * n > len(raw) - 4:
            raise CheckpointError(f"{path}: weight block of shape {shape} runs past the payload")
        weights.append(np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32))
        pos += 4 * n
    if pos != len(raw) - 4:
        raise CheckpointError(f"{path}: {len(raw) - 4 - pos} unexpected bytes after the weight blocks")

    arch_text = architecture or header["architecture"]
    expected = param_shapes(parse_architecture(arch_text))
    if len(expected) != len(weights):
        raise CheckpointShapeError(
            f"{path}: architecture {arch_text!r} has {len(expected)} weight layers, checkpoint has {len(weights)}")
    for k, (exp, w) in enumerate(zip(expected, weights)):
        if tuple(w.shape) != tuple(exp):
            raise CheckpointShapeError(
                f"{path}: layer {k} weight shape {tuple(w.shape)} does not fit {arch_text!r} (needs {tuple(exp)})")
    return Checkpoint(header["architecture"], weights, header["thresholds"], header.get("kernel", "rel"),
                      header.get("encoder", {}), header.get("hyper", {}), header.get("step", 0),
                      header["format_version"])

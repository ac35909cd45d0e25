"""Episodic task generation: sine-wave regression, synthetic few-shot
classification, and a directory-of-class-folders image loader for
desk-scale real-data episodes."""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Task:
    """One few-shot episode: support/query pairs plus bookkeeping."""

    support: list[tuple[np.ndarray, np.ndarray]]
    query: list[tuple[np.ndarray, np.ndarray]]
    meta: dict = field(default_factory=dict)

    @property
    def support_x(self) -> np.ndarray:
        return np.stack([x for x, _ in self.support])

    @property
    def support_y(self) -> np.ndarray:
        return np.stack([y for _, y in self.support])

    @property
    def query_x(self) -> np.ndarray:
        return np.stack([x for x, _ in self.query])

    @property
    def query_y(self) -> np.ndarray:
        return np.stack([y for _, y in self.query])


AMP_RANGE = (0.1, 5.0)
PHASE_RANGE = (0.0, np.pi)
SINE_INPUT_RANGE = (-5.0, 5.0)


def sample_sine_task(rng: np.random.Generator, k: int, q: int = 50) -> Task:
    """One sine-wave regression episode: y = A sin(x - p) with the amplitude
    and phase drawn uniformly from their ranges."""
    if k < 1 or q < 1:
        raise ValueError("need at least one support and one query example")
    amp = rng.uniform(*AMP_RANGE)
    phase = rng.uniform(*PHASE_RANGE)

    def draw(n):
        xs = rng.uniform(*SINE_INPUT_RANGE, size=n)
        return [(np.array([x]), np.array([amp * np.sin(x - phase)])) for x in xs]

    return Task(
        support=draw(k),
        query=draw(q),
        meta={"kind": "sine", "amplitude": amp, "phase": phase, "k": k, "q": q},
    )


def sample_synthetic_episode(
    rng: np.random.Generator,
    n_way: int,
    k: int,
    q: int,
    dim: int = 16,
    spread: float = 0.1,
) -> Task:
    """Gaussian-blob classification episode around random unit-norm centers.

    Classes are relabeled per episode, targets are one-hot; q counts query
    examples per class.
    """
    if n_way < 2:
        raise ValueError("need at least two classes")
    centers = rng.normal(size=(n_way, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    relabel = rng.permutation(n_way)

    support, query = [], []
    for source in range(n_way):
        label = relabel[source]
        onehot = np.eye(n_way)[label]
        draws = centers[source] + rng.normal(size=(k + q, dim)) * spread
        for row in draws[:k]:
            support.append((row, onehot))
        for row in draws[k:]:
            query.append((row, onehot))
    rng.shuffle(support)
    rng.shuffle(query)
    return Task(support, query, meta={"kind": "synthetic", "n_way": n_way, "k": k, "q": q})


# -- image datasets ---------------------------------------------------------------


@dataclass
class ImageDataset:
    """Flattened grayscale images in [0,1], grouped by class name."""

    classes: dict[str, list[np.ndarray]]
    image_shape: tuple[int, int]
    split: str = "train"

    @property
    def class_names(self) -> list[str]:
        return sorted(self.classes)


class ImageDecodeError(ValueError):
    pass


def _decode_pgm(data: bytes) -> np.ndarray:
    pieces = []
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        return data[start:pos]

    magic = next_token()
    if magic not in (b"P2", b"P5"):
        raise ImageDecodeError(f"not a PGM file (magic {magic!r})")
    width, height, maxval = (int(next_token()) for _ in range(3))
    if maxval <= 0 or maxval > 255:
        raise ImageDecodeError(f"unsupported PGM maxval {maxval}")
    if magic == b"P5":
        pos += 1  # single whitespace byte after the header
        raw = data[pos : pos + width * height]
        if len(raw) != width * height:
            raise ImageDecodeError("truncated PGM payload")
        img = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    else:
        vals = data[pos:].split()
        if len(vals) < width * height:
            raise ImageDecodeError("truncated PGM payload")
        img = np.array([int(v) for v in vals[: width * height]], dtype=np.float64)
    return (img / maxval).reshape(height, width)


def _png_unfilter(raw: bytes, width: int, height: int) -> np.ndarray:
    stride = width
    out = np.zeros((height, width), dtype=np.uint8)
    pos = 0
    prev = np.zeros(width, dtype=np.int32)
    for row in range(height):
        ftype = raw[pos]
        pos += 1
        line = np.frombuffer(raw[pos : pos + stride], dtype=np.uint8).astype(np.int32)
        pos += stride
        cur = np.zeros(width, dtype=np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:  # up
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            for i in range(width):
                a = cur[i - 1] if i > 0 else 0
                b = prev[i]
                c = prev[i - 1] if i > 0 else 0
                if ftype == 1:  # sub
                    pred = a
                elif ftype == 3:  # average
                    pred = (a + b) // 2
                else:  # paeth
                    p = a + b - c
                    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                    pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                cur[i] = (line[i] + pred) & 0xFF
        else:
            raise ImageDecodeError(f"unknown PNG filter type {ftype}")
        out[row] = cur.astype(np.uint8)
        prev = cur
    return out


def _decode_png(data: bytes) -> np.ndarray:
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise ImageDecodeError("not a PNG file")
    pos = 8
    width = height = None
    idat = b""
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        ctype = data[pos + 4 : pos + 8]
        chunk = data[pos + 8 : pos + 8 + length]
        pos += 12 + length
        if ctype == b"IHDR":
            width, height, depth, color, comp, filt, interlace = struct.unpack(">IIBBBBB", chunk)
            if depth != 8 or color != 0 or interlace != 0:
                raise ImageDecodeError(
                    "only 8-bit non-interlaced grayscale PNG is supported "
                    f"(depth={depth}, color type={color})"
                )
        elif ctype == b"IDAT":
            idat += chunk
        elif ctype == b"IEND":
            break
    if width is None or not idat:
        raise ImageDecodeError("PNG missing IHDR or IDAT")
    raw = zlib.decompress(idat)
    if len(raw) != height * (width + 1):
        raise ImageDecodeError("unexpected PNG payload size")
    return _png_unfilter(raw, width, height).astype(np.float64) / 255.0


def load_image_dataset(root: str, split: str = "train") -> ImageDataset:
    """Read `root/<class_name>/<images>` into flattened [0,1] vectors.

    PGM (P2/P5) and 8-bit grayscale PNG files are understood; every image in
    the dataset must share one size.
    """
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset root '{root}' is not a directory")
    classes: dict[str, list[np.ndarray]] = {}
    shape: tuple[int, int] | None = None
    for cls in sorted(os.listdir(root)):
        cdir = os.path.join(root, cls)
        if not os.path.isdir(cdir):
            continue
        images = []
        for fname in sorted(os.listdir(cdir)):
            path = os.path.join(cdir, fname)
            with open(path, "rb") as fh:
                data = fh.read()
            try:
                if fname.lower().endswith(".png"):
                    img = _decode_png(data)
                elif fname.lower().endswith((".pgm", ".pnm")):
                    img = _decode_pgm(data)
                else:
                    continue
            except ImageDecodeError as e:
                raise ImageDecodeError(f"{path}: {e}") from None
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise ImageDecodeError(
                    f"{path}: size {img.shape} differs from dataset size {shape}"
                )
            images.append(img.reshape(-1))
        if images:
            classes[cls] = images
    if not classes:
        raise FileNotFoundError(f"no decodable class folders under '{root}'")
    return ImageDataset(classes=classes, image_shape=shape, split=split)


def sample_image_episode(
    ds: ImageDataset, rng: np.random.Generator, n_way: int, k: int, q: int
) -> Task:
    """N-way episode from the dataset: per class, k support and q query
    images drawn without replacement (and without overlap)."""
    names = ds.class_names
    if n_way > len(names):
        raise ValueError(f"{n_way}-way episode from {len(names)} classes")
    chosen = rng.choice(len(names), size=n_way, replace=False)
    relabel = rng.permutation(n_way)

    support, query = [], []
    for slot, cls_idx in enumerate(chosen):
        images = ds.classes[names[cls_idx]]
        if len(images) < k + q:
            raise ValueError(
                f"class '{names[cls_idx]}' has {len(images)} images, needs {k + q}"
            )
        picks = rng.choice(len(images), size=k + q, replace=False)
        onehot = np.eye(n_way)[relabel[slot]]
        for i in picks[:k]:
            support.append((images[i], onehot))
        for i in picks[k:]:
            query.append((images[i], onehot))
    rng.shuffle(support)
    rng.shuffle(query)
    return Task(support, query, meta={"kind": "images", "n_way": n_way, "k": k, "q": q})

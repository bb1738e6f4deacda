"""Synthetic image/replica pairs with a controllable replication level.

An image is a square raster cut into a grid of cells. ``N`` disjoint groups of
cells ("content blocks") carry a random flat intensity per cell; leftover cells
are background. A level-``k`` replica keeps ``k`` of the blocks and the
background of its source, redraws the other ``N - k`` blocks, and adds pixel
noise. By default the kept blocks are always the first ``k`` (``retain =
"nested"``), so a given block is shared exactly when the level exceeds its
index; ``retain="random"`` keeps a uniformly drawn subset instead. Every pair
draws from its own sub-seed ``(seed, pair_index)`` so generation order does
not matter.

On disk, images are IMGF rasters: 16-byte header (``b"IMGF"``, h, w, c as
little-endian u32) followed by ``c*h*w`` little-endian f32 values in
channel-major order. Annotations are JSONL, one pair per line.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFile, InputError, LevelOutOfRange

IMGF_MAGIC = b"IMGF"
_IMGF_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class SynthConfig:
    size: int = 16
    N: int = 5
    cell: int = 4
    channels: int = 1
    noise_std: float = 0.05
    seed: int = 0
    level_weights: tuple | None = None
    retain: str = "nested"

    def __post_init__(self):
        if self.retain not in ("nested", "random"):
            raise InputError(f"retain must be 'nested' or 'random', got {self.retain!r}")
        if self.size % self.cell:
            raise InputError("image size must be a multiple of the cell size")
        if self.noise_std < 0:
            raise InputError("noise_std must be >= 0")
        if self.cells_per_block < 1:
            raise InputError(f"{self.n_cells} cells cannot hold {self.N} blocks")
        if self.level_weights is not None:
            w = np.asarray(self.level_weights, dtype=float)
            if w.shape != (self.N + 1,) or np.any(w < 0) or w.sum() <= 0:
                raise InputError("level_weights needs N+1 nonnegative entries with positive sum")

    @property
    def n_cells(self) -> int:
        return (self.size // self.cell) ** 2

    @property
    def cells_per_block(self) -> int:
        return self.n_cells // self.N

    def block_masks(self) -> np.ndarray:
        """``(N, size, size)`` boolean masks; blocks never overlap."""
        g = self.size // self.cell
        owner = np.full(self.n_cells, -1)
        c = self.cells_per_block
        for b in range(self.N):
            owner[b * c:(b + 1) * c] = b
        owner = owner.reshape(g, g).repeat(self.cell, 0).repeat(self.cell, 1)
        return np.stack([owner == b for b in range(self.N)])


@dataclass
class PairRecord:
    pair_id: str
    real: str
    gen: str
    level: int

    def to_dict(self) -> dict:
        return {"pair_id": self.pair_id, "real": self.real, "gen": self.gen, "level": self.level}


@dataclass
class PairSet:
    """In-memory pairs: images are ``(n, C, H, W)`` float arrays."""

    real: np.ndarray
    gen: np.ndarray
    levels: np.ndarray

    def __len__(self) -> int:
        return len(self.levels)

    def subset(self, idx) -> "PairSet":
        return PairSet(self.real[idx], self.gen[idx], self.levels[idx])


def _rng(config: SynthConfig, pair_index: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, pair_index])


def _content(rng, config: SynthConfig) -> np.ndarray:
    # one uniform value per cell and channel
    g = config.size // config.cell
    vals = rng.uniform(0.0, 1.0, size=(config.channels, g, g))
    return vals.repeat(config.cell, 1).repeat(config.cell, 2)


def gen_pair(config: SynthConfig, level: int, pair_index: int = 0):
    """``(real, replica, level)`` with images shaped ``(C, H, W)`` in [0, 1]."""
    if int(level) != level or not 0 <= level <= config.N:
        raise LevelOutOfRange(f"level {level!r} outside [0, {config.N}]")
    rng = _rng(config, pair_index)
    masks = config.block_masks()
    background = 0.5 + 0.25 * np.tanh(rng.normal(size=(config.channels, 1, 1))
                                      + np.linspace(-1, 1, config.size)[None, :, None]
                                      * rng.normal(size=(config.channels, 1, 1)))
    real = np.broadcast_to(background, (config.channels, config.size, config.size)).copy()
    content = _content(rng, config)
    for m in masks:
        real[:, m] = content[:, m]
    if config.retain == "nested":
        keep = np.arange(int(level))
    else:
        keep = rng.choice(config.N, size=int(level), replace=False)
    replica = real.copy()
    fresh = _content(rng, config)
    for b in range(config.N):
        if b not in keep:
            replica[:, masks[b]] = fresh[:, masks[b]]
    if config.noise_std > 0:
        replica = np.clip(replica + rng.normal(0.0, config.noise_std, replica.shape), 0.0, 1.0)
    return real, replica, int(level)


def sample_levels(config: SynthConfig, n: int, stream: int = 0) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 2**32 - 1, stream])
    if config.level_weights is None:
        # balanced: every level appears n // (N+1) or one more times
        levels = np.arange(n) % (config.N + 1)
        return rng.permutation(levels)
    w = np.asarray(config.level_weights, dtype=float)
    return rng.choice(config.N + 1, size=n, p=w / w.sum())


def generate(config: SynthConfig, n_pairs: int, offset: int = 0) -> PairSet:
    """``n_pairs`` pairs with pair indices ``offset .. offset + n_pairs - 1``."""
    levels = sample_levels(config, n_pairs, stream=offset)
    shape = (n_pairs, config.channels, config.size, config.size)
    real, gen = np.empty(shape), np.empty(shape)
    for i, k in enumerate(levels):
        real[i], gen[i], _ = gen_pair(config, int(k), offset + i)
    return PairSet(real, gen, np.asarray(levels, dtype=int))


def split(records, fraction: float = 0.9, seed: int = 0):
    """Deterministic shuffle, then the first ``round(fraction * n)`` go to train."""
    n = len(records)
    if n == 0:
        raise InputError("cannot split an empty record list")
    if not 0 < fraction < 1:
        raise InputError("fraction must lie in (0, 1)")
    n_train = int(round(fraction * n))
    if n_train in (0, n):
        raise InputError(f"fraction {fraction} leaves one side of a {n}-record split empty")
    order = np.random.default_rng(seed).permutation(n)
    train = [records[i] for i in order[:n_train]]
    test = [records[i] for i in order[n_train:]]
    return train, test


# ----------------------------------------------------------------------------
# files


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(_IMGF_HEADER.pack(IMGF_MAGIC, h, w, c))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _IMGF_HEADER.size:
        raise CorruptFile(f"{path}: truncated IMGF header")
    magic, h, w, c = _IMGF_HEADER.unpack_from(data)
    if magic != IMGF_MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    if len(data) != _IMGF_HEADER.size + 4 * c * h * w:
        raise CorruptFile(f"{path}: expected {c}x{h}x{w} floats")
    arr = np.frombuffer(data, dtype="<f4", offset=_IMGF_HEADER.size)
    return arr.reshape(c, h, w).astype(np.float64)


def write_annotations(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def read_annotations(path, N: int = 5) -> list[PairRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = PairRecord(str(d["pair_id"]), str(d["real"]), str(d["gen"]), d["level"])
            except (ValueError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: malformed record ({exc})") from None
            if isinstance(rec.level, bool) or not isinstance(rec.level, int):
                raise InputError(f"{path}:{lineno}: level must be an integer")
            if not 0 <= rec.level <= N:
                raise LevelOutOfRange(f"{path}:{lineno}: level {rec.level} outside [0, {N}]")
            records.append(rec)
    return records


def load_pairs(records, root=".") -> PairSet:
    """Read the images referenced by ``records`` (paths relative to ``root``)."""
    root = Path(root)
    if not records:
        raise InputError("no pairs to load")
    real = np.stack([read_image(root / r.real) for r in records])
    gen = np.stack([read_image(root / r.gen) for r in records])
    return PairSet(real, gen, np.array([r.level for r in records], dtype=int))


def write_dataset(config: SynthConfig, n_pairs: int, out_dir) -> list[PairRecord]:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    levels = sample_levels(config, n_pairs)
    records = []
    for i, k in enumerate(levels):
        real, gen, _ = gen_pair(config, int(k), i)
        pid = f"p{i:06d}"
        write_image(out / "images" / f"{pid}_real.imgf", real)
        write_image(out / "images" / f"{pid}_gen.imgf", gen)
        records.append(PairRecord(pid, f"images/{pid}_real.imgf", f"images/{pid}_gen.imgf", int(k)))
    write_annotations(records, out / "annotations.jsonl")
    return records

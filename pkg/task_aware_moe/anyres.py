#!/usr/bin/env python3
"""
Any-Resolution Encoding

A grid is cut into rows×cols local patches, each patch goes through one
randomly chosen geometric transform and the patch encoder, and a resized
copy of the whole grid is encoded as the global view. The token features
are concatenated patches first (row-major), then the global view.

Grids are single-channel float arrays with values in [0, 1].
"""

import logging
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from task_aware_moe import functional as F
from task_aware_moe.errors import ConfigError, ContractError, DimensionError
from task_aware_moe.tensor import Tensor

logger = logging.getLogger("task_aware_moe.anyres")

Grid = np.ndarray


def as_grid(values) -> Grid:
    grid = np.array(values, dtype=np.float64)
    if grid.ndim != 2 or min(grid.shape) < 1:
        raise DimensionError("a grid must be a non-empty H×W array", shapes=[grid.shape])
    if grid.size and (grid.min() < 0.0 or grid.max() > 1.0):
        raise ContractError("grid values must lie in [0, 1]")
    return grid


# ----------------------------------------------------------------------
# Transforms

def shear(grid: Grid, amount: int = 1) -> Grid:
    """out[i, j] = grid[i, j - amount·i]; cells shifted in from outside are 0"""
    h, w = grid.shape
    out = np.zeros_like(grid)
    for i in range(h):
        offset = amount * i
        if offset >= 0:
            if offset < w:
                out[i, offset:] = grid[i, :w - offset]
        elif -offset < w:
            out[i, :w + offset] = grid[i, -offset:]
    return out


TRANSFORMS: Dict[str, Callable[[Grid], Grid]] = {
    "identity": lambda g: g.copy(),
    "rotate90": lambda g: np.rot90(g, 1).copy(),
    "rotate180": lambda g: np.rot90(g, 2).copy(),
    "rotate270": lambda g: np.rot90(g, 3).copy(),
    "hflip": lambda g: np.fliplr(g).copy(),
    "vflip": lambda g: np.flipud(g).copy(),
    "shear": shear,
}


@dataclass(frozen=True)
class TransformSet:
    names: Tuple[str, ...] = ("identity", "rotate90", "rotate180", "rotate270")
    shear_amount: int = 1

    def __post_init__(self):
        if not self.names:
            raise ConfigError("a transform set needs at least one transform", keys=["anyres.transforms"])
        unknown = [n for n in self.names if n not in TRANSFORMS]
        if unknown:
            raise ConfigError(f"unknown transforms: {', '.join(unknown)}", keys=["anyres.transforms"])

    def __len__(self) -> int:
        return len(self.names)

    def apply(self, name: str, grid: Grid) -> Grid:
        if name == "shear":
            return shear(grid, self.shear_amount)
        return TRANSFORMS[name](grid)


def choose_transform(ts: TransformSet, rng: np.random.Generator) -> str:
    return ts.names[int(rng.integers(len(ts.names)))]


def random_transform(patch: Grid, ts: TransformSet, rng: np.random.Generator) -> Grid:
    """Apply exactly one uniformly drawn transform"""
    return ts.apply(choose_transform(ts, rng), patch)


# ----------------------------------------------------------------------
# Splitting and resizing

def split_grid(grid: Grid, rows: int, cols: int) -> List[Grid]:
    """Non-overlapping patches in row-major order"""
    if rows < 1 or cols < 1:
        raise ConfigError("split needs rows, cols >= 1", keys=["anyres.rows", "anyres.cols"])
    h, w = grid.shape
    if h % rows or w % cols:
        raise ContractError(f"{h}×{w} grid does not split evenly into {rows}×{cols}; resize it first")
    ph, pw = h // rows, w // cols
    return [grid[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw].copy() for r in range(rows) for c in range(cols)]


def reassemble_grid(patches: Sequence[Grid], rows: int, cols: int) -> Grid:
    if len(patches) != rows * cols:
        raise ContractError(f"expected {rows * cols} patches, got {len(patches)}")
    return np.block([[patches[r * cols + c] for c in range(cols)] for r in range(rows)])


def resize_bilinear(grid: Grid, size: Tuple[int, int]) -> Grid:
    """
    Bilinear resize to (height, width); the same size returns an exact copy.

    Pillow resamples single-channel float images in float32, so a resized
    global view carries float32 precision (about 1e-7) widened back to float64.
    """
    h, w = size
    if h < 1 or w < 1:
        raise ConfigError("resize target must be positive", keys=["anyres.resize"])
    if (h, w) == grid.shape:
        return grid.copy()
    image = Image.fromarray(np.ascontiguousarray(grid, dtype=np.float32))
    resized = image.resize((w, h), resample=Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.float64)


# ----------------------------------------------------------------------
# Encoding

@dataclass
class LinearPatchEncoder:
    """Cuts a grid into p×p tiles and projects each flattened tile to D features"""
    projection: Tensor          # [p²×D]
    patch_size: int

    @classmethod
    def init(cls, patch_size: int, dim: int, rng: np.random.Generator, std: float = 0.02) -> "LinearPatchEncoder":
        if patch_size < 1 or dim < 1:
            raise ConfigError("encoder patch size and dim must be >= 1", keys=["anyres.patch_size", "anyres.dim"])
        return cls(projection=Tensor(rng.normal(0.0, std, size=(patch_size * patch_size, dim))), patch_size=patch_size)

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    def tokens_for(self, shape: Tuple[int, int]) -> int:
        p = self.patch_size
        if shape[0] % p or shape[1] % p:
            raise ContractError(f"encoder patch size {p} does not divide a {shape[0]}×{shape[1]} grid")
        return (shape[0] // p) * (shape[1] // p)

    def encode(self, grid: Grid) -> Tensor:
        """Tensor[T×D], one row per tile in row-major order"""
        p = self.patch_size
        self.tokens_for(grid.shape)
        h, w = grid.shape
        tiles = grid.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3).reshape(-1, p * p)
        return F.matmul(Tensor(tiles), self.projection)


def anyres_encode(grid: Grid, split: Tuple[int, int], ts: TransformSet, encoder: LinearPatchEncoder,
                  resize_target: Optional[Tuple[int, int]] = None, seed: int = 0) -> Tensor:
    """
    Encode transformed local patches plus a resized global view.

    Args:
        grid: H×W values
        split: (rows, cols)
        ts: candidate transforms; patch k draws from default_rng([seed, k])
        encoder: patch encoder
        resize_target: global view size; defaults to the patch size so every
            view yields the same number of tokens

    Returns:
        Tensor[(N·T_p + T_ori) × D]; with the default resize, (N+1)·T_p rows
    """
    rows, cols = split
    patches = split_grid(grid, rows, cols)
    target = resize_target or patches[0].shape
    features = []
    for k, patch in enumerate(patches):
        transformed = random_transform(patch, ts, np.random.default_rng([seed, k]))
        features.append(encoder.encode(transformed))
    features.append(encoder.encode(resize_bilinear(grid, tuple(target))))
    out = F.concat(features, axis=0)
    logger.debug(f"anyres: {len(patches)} patches + global view -> {out.shape}")
    return out


# ----------------------------------------------------------------------
# CSV I/O

def load_grid_csv(path: str) -> Grid:
    if not os.path.exists(path):
        raise ContractError(f"grid file not found: {path}")
    return as_grid(np.loadtxt(path, delimiter=",", ndmin=2))


def save_features_csv(path: str, features: Tensor) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    np.savetxt(path, features.data, delimiter=",", fmt="%.17g")

"""Sparse surface-voxel hierarchy construction and mesh voxelization.

Grids are sparse: only occupied cells are stored, as a lexicographically
sorted unique (n,3) integer coordinate array plus optional per-cell features
and Gaussian payload indices.  Binning is half-open [lo, hi) per axis with
points exactly on the top boundary clamped into the last cell.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, ParameterError, StateError, ValidationError
from .splat_io import SplatCloud

STANDARD_RESOLUTIONS = (16, 32, 64, 128)
ETA_THRESHOLD = 0.1
FEATURE_DIM = 8


@dataclass(frozen=True)
class VoxelizerConfig:
    eta_thres: float = ETA_THRESHOLD

    def __post_init__(self):
        if not (0.0 < self.eta_thres < 1.0):
            raise ParameterError("eta_thres must lie strictly inside (0,1)")


def _canonical_order(coords: np.ndarray) -> np.ndarray:
    """Permutation sorting coords lexicographically by (x,y,z)."""
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


def pack_coords(coords: np.ndarray, resolution: int) -> np.ndarray:
    """Pack (n,3) integer coords into sortable int64 keys (lexicographic order)."""
    c = coords.astype(np.int64)
    r = int(resolution)
    return (c[:, 0] * r + c[:, 1]) * r + c[:, 2]


def unpack_coords(keys: np.ndarray, resolution: int) -> np.ndarray:
    r = int(resolution)
    z = keys % r
    rest = keys // r
    y = rest % r
    x = rest // r
    return np.stack([x, y, z], axis=1).astype(np.int32)


@dataclass
class VoxelGrid:
    """Sparse voxel grid over a cubic region of space.

    coords are unique and lexicographically sorted; features (when present)
    are per-cell 8-vectors; payload_offsets/payload_indices form a CSR layout
    of Gaussian indices per cell; representative holds the index of each
    cell's highest-opacity Gaussian.
    """

    resolution: int
    bounds: np.ndarray                       # (2,3) float64: [lo, hi]
    coords: np.ndarray                       # (n,3) int32
    features: np.ndarray | None = None       # (n,8) float32
    payload_offsets: np.ndarray | None = None   # (n+1,) int64
    payload_indices: np.ndarray | None = None   # (m,) int64
    representative: np.ndarray | None = None    # (n,) int64
    dropped: int = 0                         # Gaussians outside bounds at build time
    _keys: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        self.coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.coords)

    @staticmethod
    def empty(resolution: int, bounds=None) -> "VoxelGrid":
        if bounds is None:
            bounds = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        return VoxelGrid(resolution=resolution, bounds=bounds,
                         coords=np.zeros((0, 3), np.int32))

    @property
    def voxel_size(self) -> float:
        return float((self.bounds[1, 0] - self.bounds[0, 0]) / self.resolution)

    @property
    def keys(self) -> np.ndarray:
        if self._keys is None:
            self._keys = pack_coords(self.coords, self.resolution)
        return self._keys

    def has_features(self) -> bool:
        return self.features is not None

    def cell_centers(self) -> np.ndarray:
        return self.bounds[0] + (self.coords.astype(np.float64) + 0.5) * self.voxel_size

    def payload_of(self, cell_index: int) -> np.ndarray:
        if self.payload_offsets is None or self.payload_indices is None:
            raise StateError("grid carries no Gaussian payload")
        lo, hi = self.payload_offsets[cell_index], self.payload_offsets[cell_index + 1]
        return self.payload_indices[lo:hi]

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Indices into this grid's cells for each query coord; -1 if absent."""
        q = pack_coords(np.asarray(coords, dtype=np.int64).reshape(-1, 3), self.resolution)
        pos = np.searchsorted(self.keys, q)
        pos_clip = np.minimum(pos, len(self.keys) - 1) if len(self.keys) else pos
        found = np.zeros(len(q), dtype=bool) if not len(self.keys) else self.keys[pos_clip] == q
        out = np.where(found, pos_clip, -1)
        return out.astype(np.int64)

    def contains(self, coords: np.ndarray) -> np.ndarray:
        return self.lookup(coords) >= 0

    def same_geometry(self, other: "VoxelGrid") -> bool:
        return (self.resolution == other.resolution
                and np.allclose(self.bounds, other.bounds)
                and np.array_equal(self.coords, other.coords))


def make_grid(resolution: int, bounds, coords: np.ndarray,
              features: np.ndarray | None = None) -> VoxelGrid:
    """Build a grid from possibly unsorted/duplicated coords (features follow)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords):
        if coords.min() < 0 or coords.max() >= resolution:
            raise ValidationError("coords outside [0, resolution)")
        keys = pack_coords(coords, resolution)
        uniq, idx = np.unique(keys, return_index=True)
        coords = coords[idx]
        if features is not None:
            features = np.asarray(features, dtype=np.float32)[idx]
    return VoxelGrid(resolution=resolution, bounds=np.asarray(bounds, dtype=np.float64),
                     coords=coords.astype(np.int32), features=features)


def default_bounds(positions: np.ndarray, margin: float = 0.01) -> np.ndarray:
    """Cubified AABB of a selection, expanded by `margin` (fraction) per side."""
    pos = np.asarray(positions, dtype=np.float64)
    if len(pos) == 0:
        raise ParameterError("cannot derive bounds from an empty selection")
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = float(np.max(hi - lo)) * (1.0 + 2.0 * margin)
    if extent <= 0:
        extent = 1.0
    half = 0.5 * extent
    return np.stack([center - half, center + half])


def bin_positions(positions: np.ndarray, bounds: np.ndarray, resolution: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Half-open binning of points into cells; returns (cell coords, inside mask).

    Points exactly on the top boundary clamp into the last cell; points
    strictly outside the box are reported via the mask.
    """
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    lo, hi = bounds[0], bounds[1]
    pos = np.asarray(positions, dtype=np.float64)
    inside = np.all((pos >= lo) & (pos <= hi), axis=1)
    size = (hi - lo) / resolution
    idx = np.floor((pos - lo) / size).astype(np.int64)
    np.clip(idx, 0, resolution - 1, out=idx)
    return idx, inside


def build_surface_voxels(cloud: SplatCloud, bounds, resolution: int,
                         cfg: VoxelizerConfig = VoxelizerConfig(),
                         allow_any_resolution: bool = False) -> VoxelGrid:
    """Instantiate a cell iff it holds >= 1 Gaussian center with opacity above
    the threshold; all Gaussians falling in an instantiated cell (including
    low-opacity ones) are listed in its payload."""
    if resolution not in STANDARD_RESOLUTIONS and not allow_any_resolution:
        raise ParameterError(
            f"resolution {resolution} not in {STANDARD_RESOLUTIONS} (pass allow_any_resolution to override)")
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    if not np.all(bounds[1] > bounds[0]):
        raise ParameterError("bounds must be non-degenerate")

    idx, inside = bin_positions(cloud.positions, bounds, resolution)
    dropped = int((~inside).sum())
    gauss_idx = np.nonzero(inside)[0]
    keys_all = pack_coords(idx[inside], resolution)
    eta = cloud.opacities[inside]

    surface_keys = np.unique(keys_all[eta > cfg.eta_thres])
    member = np.searchsorted(surface_keys, keys_all)
    if len(surface_keys):
        member_clip = np.minimum(member, len(surface_keys) - 1)
        in_surface = surface_keys[member_clip] == keys_all
    else:
        in_surface = np.zeros(len(keys_all), dtype=bool)

    kept_gauss = gauss_idx[in_surface]
    kept_cell = member[in_surface]
    order = np.argsort(kept_cell, kind="stable")
    kept_gauss = kept_gauss[order]
    kept_cell = kept_cell[order]
    counts = np.bincount(kept_cell, minlength=len(surface_keys))
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    coords = unpack_coords(surface_keys, resolution)
    grid = VoxelGrid(resolution=resolution, bounds=bounds, coords=coords,
                     payload_offsets=offsets, payload_indices=kept_gauss.astype(np.int64),
                     dropped=dropped)
    _assign_representatives_inplace(grid, cloud)
    return grid


def _assign_representatives_inplace(grid: VoxelGrid, cloud: SplatCloud) -> None:
    if grid.payload_offsets is None or len(grid) == 0:
        grid.representative = np.zeros(len(grid), dtype=np.int64)
        return
    eta = cloud.opacities
    rep = np.empty(len(grid), dtype=np.int64)
    offs, pidx = grid.payload_offsets, grid.payload_indices
    for i in range(len(grid)):
        members = pidx[offs[i]:offs[i + 1]]
        # highest opacity wins; ties by lowest Gaussian index (members ascend)
        rep[i] = members[int(np.argmax(eta[members]))]
    grid.representative = rep


def assign_representative_features(grid: VoxelGrid, cloud: SplatCloud) -> VoxelGrid:
    """Set each cell's feature to the reduced feature of its highest-opacity
    Gaussian (ties broken by lowest index)."""
    if cloud.reduced_features is None:
        raise StateError("cloud has no reduced features")
    if grid.payload_offsets is None:
        raise StateError("grid carries no Gaussian payload")
    if grid.representative is None:
        _assign_representatives_inplace(grid, cloud)
    features = cloud.reduced_features[grid.representative].astype(np.float32)
    return replace(grid, features=features, _keys=grid._keys)


def downsample(grid: VoxelGrid, strict: bool = False) -> VoxelGrid:
    """Halve the resolution: a coarse cell is occupied iff any of its 2^3
    children is; payload indices merge; features are not propagated."""
    if strict and grid.resolution < 32:
        raise ParameterError("downsample below 16^3 is outside the standard hierarchy")
    if grid.resolution % 2 != 0 or grid.resolution < 2:
        raise ParameterError("resolution must be even to downsample")
    res = grid.resolution // 2
    coarse = grid.coords.astype(np.int64) // 2
    keys = pack_coords(coarse, res)
    uniq, inverse = np.unique(keys, return_inverse=True)
    coords = unpack_coords(uniq, res)

    offsets = indices = None
    if grid.payload_offsets is not None:
        counts_fine = np.diff(grid.payload_offsets)
        counts = np.bincount(inverse, weights=counts_fine, minlength=len(uniq)).astype(np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        indices = np.empty(int(counts.sum()), dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        pos = offsets[:-1].copy()
        for fine_i in order:
            c = inverse[fine_i]
            lo, hi = grid.payload_offsets[fine_i], grid.payload_offsets[fine_i + 1]
            n = hi - lo
            indices[pos[c]:pos[c] + n] = grid.payload_indices[lo:hi]
            pos[c] += n

    return VoxelGrid(resolution=res, bounds=grid.bounds.copy(), coords=coords,
                     payload_offsets=offsets, payload_indices=indices)


def downsample_to(grid: VoxelGrid, target_resolution: int) -> VoxelGrid:
    if grid.resolution % target_resolution != 0:
        raise ParameterError("target resolution must divide the grid resolution")
    out = grid
    while out.resolution > target_resolution:
        out = downsample(out)
    return out


def upsample_coarse(grid: VoxelGrid, target_resolution: int) -> VoxelGrid:
    """Expand every coarse cell into its full (ratio)^3 block of fine cells."""
    ratio = target_resolution // grid.resolution
    if ratio * grid.resolution != target_resolution or ratio & (ratio - 1):
        raise ParameterError("target/coarse resolution ratio must be a power of 2")
    offsets = np.stack(np.meshgrid(np.arange(ratio), np.arange(ratio), np.arange(ratio),
                                   indexing="ij"), axis=-1).reshape(-1, 3)
    fine = (grid.coords.astype(np.int64)[:, None, :] * ratio + offsets[None, :, :]).reshape(-1, 3)
    order = _canonical_order(fine)
    return VoxelGrid(resolution=target_resolution, bounds=grid.bounds.copy(),
                     coords=fine[order].astype(np.int32))


def build_hierarchy(grid: VoxelGrid, coarsest: int = 16) -> list[VoxelGrid]:
    """Levels from the given grid down to `coarsest` (inclusive), finest first."""
    levels = [grid]
    while levels[-1].resolution > coarsest:
        levels.append(downsample(levels[-1]))
    return levels


# ---------------------------------------------------------------------------
# Mesh voxelization (conservative surface, separating-axis test)
# ---------------------------------------------------------------------------

def _sat_triangle_box(tri: np.ndarray, centers: np.ndarray, half: float) -> np.ndarray:
    """Vectorized triangle vs axis-aligned cube overlap test.

    tri: (3,3) vertices; centers: (m,3) cube centers; half: half edge length.
    Returns boolean (m,) mask of cubes intersecting the (closed) triangle.
    """
    v = tri[None, :, :] - centers[:, None, :]      # (m,3,3) verts relative to box
    e = np.array([tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2]])  # (3,3)

    ok = np.ones(len(centers), dtype=bool)
    # box face normals: |projection of verts| vs half extent
    for ax in range(3):
        lo = v[:, :, ax].min(axis=1)
        hi = v[:, :, ax].max(axis=1)
        ok &= (lo <= half) & (hi >= -half)
    # triangle plane
    n = np.cross(e[0], e[1])
    d = np.einsum("mj,j->m", v[:, 0, :], n)
    r = half * np.abs(n).sum()
    ok &= np.abs(d) <= r
    # 9 cross-product axes
    axes_unit = np.eye(3)
    for i in range(3):
        for j in range(3):
            axis = np.cross(axes_unit[i], e[j])
            if not np.any(axis):
                continue
            p = np.einsum("mvj,j->mv", v, axis)  # (m,3)
            rad = half * np.abs(axis).sum()
            ok &= (p.min(axis=1) <= rad) & (p.max(axis=1) >= -rad)
    return ok


def voxelize_mesh(triangles: np.ndarray, bounds, resolution: int) -> tuple[VoxelGrid, int]:
    """Conservative surface voxelization: a cell is occupied iff any triangle
    intersects the cell's closed box.  Returns (grid, skipped_degenerate)."""
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    tris = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    if not np.isfinite(tris).all():
        raise ValidationError("triangles must be finite")
    size = float((bounds[1, 0] - bounds[0, 0]) / resolution)
    half = 0.5 * size
    occupied: list[np.ndarray] = []
    skipped = 0
    for tri in tris:
        if np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])) < 1e-12:
            skipped += 1
            continue
        # closed-box overlap: a triangle point exactly on a cell boundary
        # touches the cell below it too, so the lower candidate uses ceil-1
        lo = np.ceil((tri.min(axis=0) - bounds[0]) / size).astype(np.int64) - 1
        hi = np.floor((tri.max(axis=0) - bounds[0]) / size).astype(np.int64)
        lo = np.clip(lo, 0, resolution - 1)
        hi = np.clip(hi, 0, resolution - 1)
        ranges = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
        cand = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
        centers = bounds[0] + (cand + 0.5) * size
        hit = _sat_triangle_box(tri, centers, half)
        if hit.any():
            occupied.append(cand[hit])
    if occupied:
        coords = np.concatenate(occupied)
    else:
        coords = np.zeros((0, 3), dtype=np.int64)
    return make_grid(resolution, bounds, coords), skipped


# ---------------------------------------------------------------------------
# JSON interchange: {resolution, bounds:[lo,hi], cells:[{xyz, feature?}]}
# ---------------------------------------------------------------------------

def grid_to_json_dict(grid: VoxelGrid) -> dict:
    cells = []
    feats = grid.features
    for i in range(len(grid)):
        cell: dict = {"xyz": [int(v) for v in grid.coords[i]]}
        if feats is not None:
            cell["feature"] = [float(v) for v in feats[i]]
        cells.append(cell)
    return {
        "resolution": int(grid.resolution),
        "bounds": [[float(v) for v in grid.bounds[0]], [float(v) for v in grid.bounds[1]]],
        "cells": cells,
    }


def grid_from_json_dict(obj: dict) -> VoxelGrid:
    try:
        resolution = int(obj["resolution"])
        bounds = np.asarray(obj["bounds"], dtype=np.float64).reshape(2, 3)
        cells = obj["cells"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad voxel grid JSON: {e}") from None
    if resolution < 1:
        raise FormatError("resolution must be >= 1")
    if not np.all(bounds[1] > bounds[0]):
        raise FormatError("bounds must be non-degenerate")
    n = len(cells)
    coords = np.zeros((n, 3), dtype=np.int64)
    features = None
    for i, cell in enumerate(cells):
        try:
            coords[i] = cell["xyz"]
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad cell entry at index {i}: {e}") from None
        feat = cell.get("feature")
        if feat is not None:
            if features is None:
                features = np.zeros((n, FEATURE_DIM), dtype=np.float32)
            if len(feat) != FEATURE_DIM:
                raise FormatError(f"cell {i}: feature must have {FEATURE_DIM} entries")
            features[i] = feat
    if len(coords) and (coords.min() < 0 or coords.max() >= resolution):
        raise FormatError("cell coords outside [0, resolution)")
    if not np.isfinite(bounds).all() or (features is not None and not np.isfinite(features).all()):
        raise FormatError("non-finite value in grid JSON")
    return make_grid(resolution, bounds, coords, features)


def grid_to_json(grid: VoxelGrid) -> str:
    return json.dumps(grid_to_json_dict(grid))


def grid_from_json(text: str) -> VoxelGrid:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e}") from None
    return grid_from_json_dict(obj)

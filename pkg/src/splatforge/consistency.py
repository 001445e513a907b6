"""Patch-based consistency refinement and nearest-neighbor remapping.

The refinement loop repeatedly matches every local patch of the generated
grid against all exemplar patches (exhaustively), rebuilds occupancy by
voting over the matched patches, and blends features by occupancy-weighted
averaging.  Growth is clamped to an L1 distance of lambda_patch from the
original generated support.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ValidationError
from .gca import l1_ball_offsets
from .splat_io import SplatCloud
from .voxelize import VoxelGrid, pack_coords

FEATURE_DIM = 8
HALF = FEATURE_DIM // 2


@dataclass(frozen=True)
class ConsistencyConfig:
    l: int = 5
    iterations: int = 7
    w: float = 0.5
    beta: float = 0.5
    lambda_patch: int = 2

    def __post_init__(self):
        if self.l < 1 or self.l % 2 == 0:
            raise ParameterError("patch size l must be odd and >= 1")
        if not (0.0 <= self.w <= 1.0):
            raise ParameterError("w must lie in [0,1]")
        if not (0.0 < self.beta <= 1.0):
            raise ParameterError("beta must lie in (0,1]")
        if self.lambda_patch < 0 or self.iterations < 0:
            raise ParameterError("lambda_patch and iterations must be >= 0")


@dataclass
class Patch:
    """Local l^3 window: occupancy mask, features (zero rows where
    unoccupied, unit-or-zero norm per 4-dim half), and the center cell."""

    occupancy: np.ndarray          # (l^3,) bool
    features: np.ndarray           # (l^3, 8) float32
    center: np.ndarray = field(default_factory=lambda: np.zeros(3, np.int32))

    @property
    def size(self) -> int:
        return len(self.occupancy)


def patch_offsets(l: int) -> np.ndarray:
    """Window offsets in the fixed flattening order, (l^3, 3) int."""
    h = l // 2
    r = np.arange(-h, h + 1)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def normalize_halves(features: np.ndarray) -> np.ndarray:
    """L2-normalize each 4-dim half per row; zero rows stay zero."""
    out = np.asarray(features, dtype=np.float32).copy()
    for h in range(2):
        sl = out[:, h * HALF:(h + 1) * HALF]
        norms = np.linalg.norm(sl.astype(np.float64), axis=1)
        nz = norms > 0
        sl[nz] = (sl[nz].astype(np.float64) / norms[nz, None]).astype(np.float32)
    return out


def _dense_window_arrays(grid: VoxelGrid, h: int):
    """Dense occupancy/feature blocks over the padded grid bounding box."""
    coords = grid.coords.astype(np.int64)
    lo = coords.min(axis=0) - h
    extent = coords.max(axis=0) + h + 1 - lo
    occ = np.zeros(extent, dtype=bool)
    feat = np.zeros((*extent, FEATURE_DIM), dtype=np.float32)
    ix, iy, iz = (coords - lo).T
    occ[ix, iy, iz] = True
    feat[ix, iy, iz] = grid.features
    return occ, feat, lo


def extract_patches(grid: VoxelGrid, l: int) -> list[Patch]:
    """One patch per occupied voxel; out-of-bounds positions read as
    unoccupied with zero features."""
    if not grid.has_features():
        raise ValidationError("patch extraction needs a featured grid")
    if len(grid) == 0:
        return []
    h = l // 2
    occ, feat, lo = _dense_window_arrays(grid, h)
    offs = patch_offsets(l)
    win = grid.coords.astype(np.int64)[:, None, :] + offs[None, :, :] - lo
    ox, oy, oz = win[..., 0], win[..., 1], win[..., 2]
    O = occ[ox, oy, oz]            # (n, l^3)
    F = feat[ox, oy, oz]           # (n, l^3, 8)
    return [Patch(O[i], F[i], grid.coords[i].copy()) for i in range(len(grid))]


def patch_distance(pe: Patch, pg: Patch, w: float) -> float:
    """Weighted occupancy + masked-cosine feature distance between patches."""
    if pe.size != pg.size:
        raise ParameterError("patch sizes differ")
    p = float(pe.size)
    oe = pe.occupancy.astype(np.float64)
    og = pg.occupancy.astype(np.float64)
    ov = float(np.dot(oe, og))
    d_occ = 1.0 - ov / p
    if ov > 0.0:
        fe = pe.features.astype(np.float64)
        fg = pg.features.astype(np.float64)
        s1 = float(np.dot(fe[:, :HALF].ravel(), fg[:, :HALF].ravel()))
        s2 = float(np.dot(fe[:, HALF:].ravel(), fg[:, HALF:].ravel()))
        d_feat = 1.0 - 0.5 * (s1 / ov + s2 / ov)
    else:
        d_feat = 2.0
    return (1.0 - w) * d_occ + w * d_feat


def _patch_matrices(patches: list[Patch]):
    O = np.stack([p.occupancy for p in patches]).astype(np.float64)
    F = np.stack([p.features for p in patches]).astype(np.float64)
    n, p, _ = F.shape
    F1 = F[:, :, :HALF].reshape(n, p * HALF)
    F2 = F[:, :, HALF:].reshape(n, p * HALF)
    return O, F1, F2


def match_exhaustive(generated: list[Patch], exemplar: list[Patch],
                     w: float, chunk: int = 256) -> np.ndarray:
    """Best exemplar patch index per generated patch (ties: lowest index).

    Exact argmin over all pairs, computed in tiles of matrix products.
    """
    if not exemplar:
        raise ParameterError("exemplar patch set is empty")
    if not generated:
        return np.zeros(0, dtype=np.int64)
    p = float(exemplar[0].size)
    Oe, Fe1, Fe2 = _patch_matrices(exemplar)
    Og, Fg1, Fg2 = _patch_matrices(generated)
    out = np.empty(len(generated), dtype=np.int64)
    zero_overlap = (1.0 - w) * 1.0 + w * 2.0
    for s in range(0, len(generated), chunk):
        e = min(s + chunk, len(generated))
        ov = Og[s:e] @ Oe.T
        s1 = Fg1[s:e] @ Fe1.T
        s2 = Fg2[s:e] @ Fe2.T
        with np.errstate(divide="ignore", invalid="ignore"):
            d = ((1.0 - w) * (1.0 - ov / p)
                 + w * (1.0 - 0.5 * (s1 / ov + s2 / ov)))
        d[ov == 0.0] = zero_overlap
        out[s:e] = np.argmin(d, axis=1)
    return out


def _dilate_l1(coords: np.ndarray, radius: int, resolution: int) -> np.ndarray:
    offs = l1_ball_offsets(radius)
    cells = (coords.astype(np.int64)[:, None, :] + offs[None]).reshape(-1, 3)
    cells = cells[np.all((cells >= 0) & (cells < resolution), axis=1)]
    keys = np.unique(pack_coords(cells, resolution))
    return keys


def blend_and_vote(matches: np.ndarray, exemplar_patches: list[Patch],
                   current: VoxelGrid, cfg: ConsistencyConfig,
                   initial_support: np.ndarray) -> VoxelGrid:
    """Voting occupancy update plus occupancy-weighted feature blending.

    A cell becomes occupied when the fraction of covering matched patches
    that vote it occupied reaches beta; cells farther (L1) than lambda_patch
    from the initial generated support are forced unoccupied.
    """
    R = current.resolution
    if len(current) == 0:
        return current
    offs = patch_offsets(cfg.l)
    Oe = np.stack([p.occupancy for p in exemplar_patches])
    Fe = np.stack([p.features for p in exemplar_patches]).astype(np.float64)

    centers = current.coords.astype(np.int64)
    cells = centers[:, None, :] + offs[None]                   # (n, p, 3)
    valid = np.all((cells >= 0) & (cells < R), axis=2)
    keys = pack_coords(cells.reshape(-1, 3)[valid.ravel()], R)
    votes_occ = Oe[matches].astype(np.float64)[valid]
    feats = Fe[matches][valid]                                  # (m, 8)

    uniq, inv = np.unique(keys, return_inverse=True)
    cover = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
    occ_votes = np.bincount(inv, weights=votes_occ, minlength=len(uniq))
    fsum = np.empty((len(uniq), FEATURE_DIM))
    for k in range(FEATURE_DIM):
        fsum[:, k] = np.bincount(inv, weights=feats[:, k], minlength=len(uniq))

    allowed = _dilate_l1(initial_support, cfg.lambda_patch, R)
    in_allowed = np.isin(uniq, allowed, assume_unique=True)
    occupied = (occ_votes / cover >= cfg.beta) & in_allowed
    if not np.any(occupied):
        return VoxelGrid(resolution=R, bounds=current.bounds.copy(),
                         coords=np.zeros((0, 3), np.int32),
                         features=np.zeros((0, FEATURE_DIM), np.float32))

    blended = fsum[occupied] / occ_votes[occupied, None]
    from .voxelize import unpack_coords
    new_coords = unpack_coords(uniq[occupied], R).astype(np.int32)
    return VoxelGrid(resolution=R, bounds=current.bounds.copy(),
                     coords=new_coords,
                     features=normalize_halves(blended))


def run_consistency(grid: VoxelGrid, exemplar: VoxelGrid,
                    cfg: ConsistencyConfig) -> VoxelGrid:
    """Iterated extract -> exhaustive match -> blend/vote refinement.

    Feature halves of both inputs are re-normalized on entry; expansion is
    measured against the original generated support on every iteration.
    """
    if len(exemplar) == 0:
        raise ParameterError("exemplar grid is empty")
    if not (grid.has_features() and exemplar.has_features()):
        raise ValidationError("consistency needs featured grids")
    if grid.resolution != exemplar.resolution:
        raise ParameterError("grid and exemplar resolutions differ")

    exemplar_n = VoxelGrid(resolution=exemplar.resolution,
                           bounds=exemplar.bounds.copy(),
                           coords=exemplar.coords,
                           features=normalize_halves(exemplar.features))
    current = VoxelGrid(resolution=grid.resolution, bounds=grid.bounds.copy(),
                        coords=grid.coords,
                        features=normalize_halves(grid.features))
    initial_support = grid.coords.copy()
    exemplar_patches = extract_patches(exemplar_n, cfg.l)
    for _ in range(cfg.iterations):
        if len(current) == 0:
            break
        gen_patches = extract_patches(current, cfg.l)
        matches = match_exhaustive(gen_patches, exemplar_patches, cfg.w)
        current = blend_and_vote(matches, exemplar_patches, current, cfg,
                                 initial_support)
    return current


def remap_voxelwise_nn(grid: VoxelGrid, exemplar: VoxelGrid,
                       chunk: int = 4096) -> np.ndarray:
    """Per-voxel nearest exemplar cell by cosine similarity summed over the
    two feature halves (ties: lowest exemplar cell index)."""
    if len(exemplar) == 0:
        raise ParameterError("exemplar grid is empty")
    if not (grid.has_features() and exemplar.has_features()):
        raise ValidationError("voxelwise remap needs featured grids")
    g = normalize_halves(grid.features).astype(np.float64)
    e = normalize_halves(exemplar.features).astype(np.float64)
    out = np.empty(len(grid), dtype=np.int64)
    for s in range(0, len(grid), chunk):
        stop = min(s + chunk, len(grid))
        sim = g[s:stop] @ e.T
        out[s:stop] = np.argmax(sim, axis=1)
    return out


def transplant_gaussians(mapping: np.ndarray, exemplar_cloud: SplatCloud,
                         exemplar_grid: VoxelGrid, out_grid: VoxelGrid
                         ) -> tuple[SplatCloud, int]:
    """Copy each mapped exemplar cell's Gaussians to the output voxel.

    Gaussians are translated by (target cell center - source cell center)
    and keep scale/rotation/SH/opacity.  Returns (cloud, skipped voxel
    count); voxels whose source cell has an empty payload are skipped.
    """
    mapping = np.asarray(mapping, dtype=np.int64)
    if len(mapping) != len(out_grid):
        raise ParameterError("mapping must cover every occupied output voxel")
    if exemplar_grid.payload_offsets is None:
        raise ValidationError("exemplar grid carries no Gaussian payload")
    if len(mapping) and (mapping.min() < 0 or mapping.max() >= len(exemplar_grid)):
        raise ParameterError("mapping index out of range")

    src_centers = exemplar_grid.cell_centers()[mapping]
    dst_centers = out_grid.cell_centers()
    sizes = (exemplar_grid.payload_offsets[mapping + 1]
             - exemplar_grid.payload_offsets[mapping])
    skipped = int(np.count_nonzero(sizes == 0))
    if len(mapping) == 0 or sizes.sum() == 0:
        return exemplar_cloud.select(np.zeros(0, dtype=np.int64)), skipped

    idx_parts = [exemplar_grid.payload_of(int(m)) for m in mapping]
    indices = np.concatenate(idx_parts)
    deltas = np.repeat(dst_centers - src_centers, sizes, axis=0)
    cloud = exemplar_cloud.select(indices)
    cloud.positions = cloud.positions + deltas.astype(np.float32)
    return cloud, skipped

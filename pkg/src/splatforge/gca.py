"""GCA state machine: neighborhood dilation, transition sampling, conditional
initialization, and the inference loop with sigma annealing and a final
mode-seeking step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, SamplerBudgetError
from .net.sparse import SparseTensor
from .net.unet import TransitionKernelModel, forward_unet
from .voxelize import VoxelGrid, pack_coords, upsample_coarse

FEATURE_DIM = 8


def sigma_schedule(t: int | np.ndarray) -> np.ndarray | float:
    """Feature noise level at step t."""
    return np.exp(-1.0 - 0.01 * np.asarray(t, dtype=np.float64))


@dataclass
class GcaState:
    """Sparse occupancy state: presence of a coord encodes o_c = 1."""

    coords: np.ndarray    # (n,3) int32, unique, lexicographically sorted
    features: np.ndarray  # (n,K) float32
    resolution: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float32).reshape(len(self.coords), FEATURE_DIM)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def keys(self) -> np.ndarray:
        return pack_coords(self.coords, self.resolution)

    @staticmethod
    def empty(resolution: int) -> "GcaState":
        return GcaState(np.zeros((0, 3), np.int32), np.zeros((0, FEATURE_DIM), np.float32),
                        resolution)


@dataclass(frozen=True)
class SamplerConfig:
    T_infer: int = 7
    neighborhood_radius: int = 2
    mode_seeking: bool = True
    seed: int = 0
    cell_budget: int | None = None  # default: 2 * R^3

    def __post_init__(self):
        if self.T_infer < 1:
            raise ParameterError("T_infer must be >= 1")
        if self.neighborhood_radius < 1:
            raise ParameterError("neighborhood radius must be >= 1")


def l1_ball_offsets(r: int) -> np.ndarray:
    """All integer offsets with |dx|+|dy|+|dz| <= r, deterministic order."""
    rng = np.arange(-r, r + 1)
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid[np.abs(grid).sum(axis=1) <= r]


def neighborhood(state: GcaState, r: int = 2) -> np.ndarray:
    """Union of L1 balls of radius r around occupied cells, clipped to bounds.

    Returns unique (m,3) coords in lexicographic order.
    """
    if len(state) == 0:
        return np.zeros((0, 3), dtype=np.int32)
    offsets = l1_ball_offsets(r)
    cand = (state.coords.astype(np.int64)[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    inside = np.all((cand >= 0) & (cand < state.resolution), axis=1)
    cand = cand[inside]
    keys = pack_coords(cand, state.resolution)
    uniq = np.unique(keys)
    res = state.resolution
    z = uniq % res
    y = (uniq // res) % res
    x = uniq // (res * res)
    return np.stack([x, y, z], axis=1).astype(np.int32)


def sample_transition(cells: np.ndarray, lam: np.ndarray, mu: np.ndarray,
                      sigma_t: float, rng: np.random.Generator,
                      resolution: int) -> GcaState:
    """Independent per-cell sampling: occupancy ~ Bernoulli(lambda), features
    ~ N(mu, sigma_t^2 I) for occupied cells, absent (z=0) otherwise."""
    occ = rng.random(len(cells)) < lam
    coords = np.asarray(cells, dtype=np.int32)[occ]
    base = np.asarray(mu, dtype=np.float64)[occ]
    if sigma_t > 0:
        feats = base + sigma_t * rng.standard_normal(base.shape)
    else:
        feats = base
    return GcaState(coords, feats.astype(np.float32), resolution)


def mode_seek(cells: np.ndarray, lam: np.ndarray, mu: np.ndarray,
              resolution: int) -> GcaState:
    """Deterministic step: occupancy = [lambda >= 0.5], features = mu."""
    occ = lam >= 0.5
    return GcaState(np.asarray(cells, dtype=np.int32)[occ],
                    np.asarray(mu, dtype=np.float32)[occ], resolution)


def init_conditional(coarse: VoxelGrid, target_resolution: int,
                     rng: np.random.Generator) -> tuple[GcaState, np.ndarray]:
    """Upsample the coarse conditioning to the target resolution; occupied
    cells start with standard-normal features.  Returns (s0, mask coords)."""
    if len(coarse) == 0:
        raise ParameterError("conditioning grid is empty")
    ratio = target_resolution // coarse.resolution
    if ratio not in (2, 4, 8) or ratio * coarse.resolution != target_resolution:
        raise ParameterError(
            f"target/coarse ratio must be one of 2, 4, 8 (got {target_resolution}/{coarse.resolution})")
    fine = upsample_coarse(coarse, target_resolution)
    feats = rng.standard_normal((len(fine), FEATURE_DIM)).astype(np.float32)
    state = GcaState(fine.coords, feats, target_resolution)
    return state, fine.coords.copy()


@dataclass
class SamplerRun:
    """Final state plus bookkeeping from one sampling run."""

    final: GcaState
    steps: int
    initial_support: np.ndarray = field(repr=False)


def run_sampler(model: TransitionKernelModel, coarse: VoxelGrid,
                cfg: SamplerConfig, target_resolution: int,
                on_state=None) -> SamplerRun:
    """Roll T_infer stochastic transitions plus one mode-seeking step.

    `on_state(t, state)` is invoked for s^1..s^{T+1} in step order for live
    visualization.  Raises SamplerBudgetError if the state outgrows the cell
    budget.
    """
    rng = np.random.default_rng(cfg.seed)
    r = cfg.neighborhood_radius
    budget = cfg.cell_budget if cfg.cell_budget is not None else 2 * target_resolution ** 3
    model.eval()

    state, mask_coords = init_conditional(coarse, target_resolution, rng)
    initial_support = state.coords.copy()
    total_steps = cfg.T_infer + (1 if cfg.mode_seeking else 0)
    for t in range(cfg.T_infer):
        cells = neighborhood(state, r)
        if len(cells) > budget:
            raise SamplerBudgetError(
                f"evaluation set grew to {len(cells)} cells at step {t} (budget {budget})",
                len(cells), budget)
        lam, mu = forward_unet(model, SparseTensor(state.coords, state.features),
                               mask_coords, cells, target_resolution)
        state = sample_transition(cells, lam, mu, float(sigma_schedule(t)), rng,
                                  target_resolution)
        if on_state is not None:
            on_state(t + 1, state)
    if cfg.mode_seeking:
        cells = neighborhood(state, r)
        if len(cells) > budget:
            raise SamplerBudgetError(
                f"evaluation set grew to {len(cells)} cells at mode-seeking (budget {budget})",
                len(cells), budget)
        lam, mu = forward_unet(model, SparseTensor(state.coords, state.features),
                               mask_coords, cells, target_resolution)
        state = mode_seek(cells, lam, mu, target_resolution)
        if on_state is not None:
            on_state(cfg.T_infer + 1, state)
    return SamplerRun(final=state, steps=total_steps, initial_support=initial_support)


def state_to_grid(state: GcaState, bounds: np.ndarray) -> VoxelGrid:
    return VoxelGrid(resolution=state.resolution, bounds=bounds,
                     coords=state.coords.copy(), features=state.features.copy())


def dilate_support(coords: np.ndarray, r: int, resolution: int) -> np.ndarray:
    """L1 dilation oracle used by invariants: unique coords within distance r."""
    if len(coords) == 0:
        return np.zeros((0, 3), dtype=np.int32)
    state = GcaState(coords, np.zeros((len(coords), FEATURE_DIM), np.float32), resolution)
    return neighborhood(state, r)

"""Single-exemplar infusion training.

Each iteration teacher-forces the conditioning: a random crop of the
exemplar provides both the coarse conditioning (initial state) and the
ground-truth cells the infused kernel is biased toward.  The loss is the
closed-form KL divergence between the infused kernel and the transition
kernel, with the feature term down-weighted by lambda_z and gated by the
infused occupancy probability.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, TrainingError, ValidationError
from .gca import GcaState, init_conditional, neighborhood, sigma_schedule
from .net import AdamW, CoordContext, backward, build_model, serialize_model
from .net.unet import NetworkConfig, TransitionKernelModel, assemble_inputs
from .voxelize import VoxelGrid, downsample_to, pack_coords

FEATURE_DIM = 8


@dataclass(frozen=True)
class InfusionSchedule:
    alpha0: float = 0.1
    alphaT: float = 0.25
    T_train: int = 5
    lambda_z: float = 0.01
    iterations: int = 10000

    def __post_init__(self):
        if not (0.0 <= self.alpha0 <= self.alphaT <= 1.0):
            raise ParameterError("need 0 <= alpha0 <= alphaT <= 1")
        if self.T_train < 1:
            raise ParameterError("T_train must be >= 1")

    @property
    def alpha1(self) -> float:
        """Linear growth rate of the infusion coefficient."""
        return (self.alphaT - self.alpha0) / self.T_train

    def alpha(self, t: int) -> float:
        """Infusion coefficient at step t (endpoints exact)."""
        u = min(t / self.T_train, 1.0)
        return min((1.0 - u) * self.alpha0 + u * self.alphaT, 1.0)


@dataclass
class ExemplarVoxels:
    """Featured target grid plus its coarse conditioning grid."""

    target: VoxelGrid
    coarse: VoxelGrid

    def __post_init__(self):
        if not self.target.has_features():
            raise ValidationError("exemplar target grid must carry features")
        if len(self.target) == 0:
            raise ValidationError("exemplar is empty")
        check = downsample_to(self.target, self.coarse.resolution)
        if not np.array_equal(check.coords, self.coarse.coords):
            raise ValidationError("coarse grid is not the downsampled target grid")

    @property
    def ratio(self) -> int:
        return self.target.resolution // self.coarse.resolution

    @staticmethod
    def from_target(target: VoxelGrid, coarse_resolution: int) -> "ExemplarVoxels":
        return ExemplarVoxels(target, downsample_to(target, coarse_resolution))


class GridIndex:
    """Occupancy/feature lookup into a featured grid by cell coordinate."""

    def __init__(self, grid: VoxelGrid):
        self.resolution = grid.resolution
        self.keys = grid.keys
        self.features = (grid.features if grid.features is not None
                         else np.zeros((len(grid), FEATURE_DIM), np.float32))

    def query(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (occupancy bool (n,), features (n,K); zero off-support)."""
        q = pack_coords(np.asarray(coords, dtype=np.int64), self.resolution)
        n = len(self.keys)
        if n == 0:
            return np.zeros(len(q), bool), np.zeros((len(q), FEATURE_DIM), np.float32)
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, n - 1)
        occ = self.keys[pos_c] == q
        feats = np.zeros((len(q), FEATURE_DIM), dtype=np.float32)
        feats[occ] = self.features[pos_c[occ]]
        return occ, feats


def infused_sample(cells: np.ndarray, lam: np.ndarray, mu: np.ndarray,
                   alpha_t: float, sigma_t: float, occ_x: np.ndarray,
                   zx: np.ndarray, rng: np.random.Generator,
                   resolution: int) -> GcaState:
    """Sample the infused kernel: occupancy ~ Ber((1-a) lam + a 1[x]),
    features ~ N((1-a) mu + a z^x, sigma_t^2 I) on occupied cells."""
    if not (0.0 <= alpha_t <= 1.0):
        raise ParameterError("alpha_t must lie in [0,1]")
    q = (1.0 - alpha_t) * np.asarray(lam, dtype=np.float64) + alpha_t * occ_x
    occ = rng.random(len(q)) < q
    mean = (1.0 - alpha_t) * np.asarray(mu, dtype=np.float64)[occ] \
        + alpha_t * np.asarray(zx, dtype=np.float64)[occ]
    if sigma_t > 0:
        feats = mean + sigma_t * rng.standard_normal(mean.shape)
    else:
        feats = mean
    return GcaState(np.asarray(cells, dtype=np.int32)[occ], feats.astype(np.float32),
                    resolution)


def _xlogy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    nz = a != 0
    out[nz] = a[nz] * np.log(b[nz])
    return out


@dataclass
class KlResult:
    loss_o: float
    loss_z: float
    d_logit: np.ndarray  # (n,)
    d_mu: np.ndarray     # (n,K)

    @property
    def total(self) -> float:
        return self.loss_o + self.loss_z


def kl_loss(logits: np.ndarray, mu: np.ndarray, occ_x: np.ndarray, zx: np.ndarray,
            alpha_t: float, sigma_t: float, lambda_z: float = 0.01) -> KlResult:
    """Closed-form per-cell KL between infused and transition kernels.

    Bernoulli term KL(q || lambda) plus q * lambda_z * ||mu_q - mu||^2 /
    (2 sigma_t^2) with mu_q = (1-a) mu + a z^x.  Returns the mean over cells
    and analytic gradients (the infused kernel's dependence on lambda and mu
    is differentiated through, matching finite differences of this scalar).
    """
    if sigma_t <= 0:
        raise ParameterError("sigma_t must be > 0 in the loss")
    l = np.asarray(logits, dtype=np.float64).reshape(-1)
    mu64 = np.asarray(mu, dtype=np.float64)
    zx64 = np.asarray(zx, dtype=np.float64)
    occ = np.asarray(occ_x, dtype=np.float64)
    n = len(l)
    if n == 0:
        return KlResult(0.0, 0.0, np.zeros(0), np.zeros((0, FEATURE_DIM)))
    a = float(alpha_t)
    if a == 0.0:
        # q coincides with the transition kernel: KL and its gradients vanish.
        return KlResult(0.0, 0.0, np.zeros(n), np.zeros((n, mu64.shape[1])))

    ln_lam = -np.logaddexp(0.0, -l)
    ln_1mlam = -np.logaddexp(0.0, l)
    lam = np.exp(ln_lam)
    lam_1mlam = np.exp(ln_lam + ln_1mlam)
    q = (1.0 - a) * lam + a * occ

    loss_o_cells = (_xlogy(q, q) + _xlogy(1.0 - q, 1.0 - q)
                    - q * ln_lam - (1.0 - q) * ln_1mlam)

    diff = mu64 - zx64
    ssq = np.sum(diff * diff, axis=1)
    z_scale = lambda_z * a * a / (2.0 * sigma_t * sigma_t)
    loss_z_cells = q * z_scale * ssq

    interior = (q > 0.0) & (q < 1.0)
    dq = np.zeros(n)
    dq[interior] = (np.log(q[interior]) - np.log1p(-q[interior])
                    - (ln_lam[interior] - ln_1mlam[interior]))
    dq += z_scale * ssq  # feature term's dependence on q
    d_logit = ((1.0 - a) * lam_1mlam * dq + (lam - q)) / n
    d_mu = (q * lambda_z * a * a / (sigma_t * sigma_t))[:, None] * diff / n

    return KlResult(float(loss_o_cells.mean()), float(loss_z_cells.mean()),
                    d_logit, d_mu)


def crop_augment(exemplar: ExemplarVoxels, rng: np.random.Generator,
                 min_frac: float = 0.5, max_frac: float = 1.0,
                 min_voxels: int = 32, max_attempts: int = 20) -> ExemplarVoxels:
    """Axis-aligned random crop with per-axis extent uniform in
    [min_frac, max_frac] of the occupied bounding box, window snapped outward
    to coarse-cell boundaries; undersized crops are resampled."""
    target = exemplar.target
    ratio = exemplar.ratio
    coords = target.coords.astype(np.int64)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    size = hi - lo + 1

    for _ in range(max_attempts):
        frac = rng.uniform(min_frac, max_frac, size=3)
        extent = np.maximum(1, np.round(frac * size).astype(np.int64))
        extent = np.minimum(extent, size)
        start = lo + (rng.integers(0, size - extent + 1, size=3)
                      if np.any(size > extent) else 0)
        win_lo = (start // ratio) * ratio
        win_hi = -(-(start + extent) // ratio) * ratio  # ceil to coarse boundary
        keep = np.all((coords >= win_lo) & (coords < win_hi), axis=1)
        if int(keep.sum()) < min(min_voxels, len(coords)):
            continue
        crop_target = VoxelGrid(
            resolution=target.resolution, bounds=target.bounds.copy(),
            coords=target.coords[keep],
            features=None if target.features is None else target.features[keep])
        return ExemplarVoxels.from_target(crop_target, exemplar.coarse.resolution)
    return exemplar


@dataclass
class TrainRecord:
    iteration: int
    loss_o: float
    loss_z: float
    total: float
    wall_clock: float

    def as_dict(self) -> dict:
        return {"iteration": self.iteration, "loss_o": self.loss_o,
                "loss_z": self.loss_z, "total": self.total,
                "wall_clock": self.wall_clock}


def train_primitive(exemplar: ExemplarVoxels, net_cfg: NetworkConfig,
                    schedule: InfusionSchedule, seed: int,
                    progress=None, lr: float = 5e-4, weight_decay: float = 1e-6,
                    neighborhood_radius: int = 2, dtype=np.float32,
                    log_every: int = 100) -> tuple[TransitionKernelModel, list[TrainRecord]]:
    """Run infusion training and return (model, training log).

    Per iteration: sample a crop, teacher-force s0 from its coarse grid, roll
    T_train infused steps accumulating loss gradients, then take one
    optimizer step.  Deterministic given the seed.  `progress(record)` is
    invoked on every log record.
    """
    model = build_model(net_cfg, seed=seed, dtype=dtype)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    resolution = exemplar.target.resolution
    T = schedule.T_train
    log: list[TrainRecord] = []
    window: list[tuple[float, float]] = []
    t0 = time.monotonic()
    checkpoint = serialize_model(model)
    model.train()

    for it in range(schedule.iterations):
        crop = crop_augment(exemplar, rng)
        state, mask_coords = init_conditional(crop.coarse, resolution, rng)
        index = GridIndex(crop.target)
        loss_o = loss_z = 0.0
        for t in range(T):
            cells = neighborhood(state, neighborhood_radius)
            if len(cells) == 0:
                break
            ctx = CoordContext(cells, resolution, net_cfg.depth)
            inputs = assemble_inputs(cells, state.coords, state.features,
                                     mask_coords, resolution, dtype=model.dtype)
            logit_t, mu_t = model.forward(ctx, inputs)
            occ_x, zx = index.query(cells)
            alpha_t = schedule.alpha(t)
            sig_t = float(sigma_schedule(t))
            res = kl_loss(logit_t.data[:, 0], mu_t.data, occ_x, zx,
                          alpha_t, sig_t, schedule.lambda_z)
            loss_o += res.loss_o / T
            loss_z += res.loss_z / T
            backward([(logit_t, (res.d_logit / T)[:, None]),
                      (mu_t, res.d_mu / T)])
            lam = 1.0 / (1.0 + np.exp(-logit_t.data[:, 0].astype(np.float64)))
            state = infused_sample(cells, lam, mu_t.data, alpha_t, sig_t,
                                   occ_x, zx, rng, resolution)
        if not np.isfinite(loss_o + loss_z):
            raise TrainingError(f"non-finite loss at iteration {it + 1}",
                                checkpoint=checkpoint, iteration=it + 1)
        opt.step()
        opt.zero_grad()
        window.append((loss_o, loss_z))
        if (it + 1) % log_every == 0 or it + 1 == schedule.iterations:
            w = np.asarray(window)
            rec = TrainRecord(iteration=it + 1,
                              loss_o=float(w[:, 0].mean()),
                              loss_z=float(w[:, 1].mean()),
                              total=float(w.sum(axis=1).mean()),
                              wall_clock=time.monotonic() - t0)
            log.append(rec)
            if progress is not None:
                progress(rec)
            window.clear()
            checkpoint = serialize_model(model)
    model.eval()
    return model, log

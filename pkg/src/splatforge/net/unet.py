"""The light sparse U-Net producing per-cell occupancy logits and feature means.

Template: a stem convolution at `base_channels`, one residual block per
resolution with the width doubling at each level, stride-2 convolutions
between levels, two residual blocks at the deepest level, and a mirrored
decoder with skip concatenation.  Two zero-initialized heads emit the
occupancy logit and the K-dim feature mean, so an untrained network starts
at lambda = 0.5, mu = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError
from .autodiff import Parameter, Tensor
from .layers import ConvBlock, ResBlock, concat, init_conv_weight
from .sparse import CoordContext, SparseTensor, sparse_conv

FEATURE_DIM = 8
# input channels: K feature dims + occupancy bit + conditioning-mask bit
INPUT_CHANNELS = FEATURE_DIM + 2


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 16
    channel_mult: int = 2
    depth: int = 2
    blocks_per_level: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ParameterError("depth must be >= 1")
        if self.base_channels < 1 or self.channel_mult < 1:
            raise ParameterError("channels must be positive")

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * self.channel_mult ** (i + 1)
                     for i in range(self.depth))


class TransitionKernelModel:
    """Parameters of the transition-kernel network (lambda, mu heads)."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        ch = cfg.level_channels

        self.stem = ConvBlock(rng, INPUT_CHANNELS, cfg.base_channels, dtype, "stem")
        self.encoders = []
        self.downs = []
        prev = cfg.base_channels
        for i, c in enumerate(ch):
            self.encoders.append(ResBlock(rng, prev, c, dtype, f"enc{i}"))
            prev = c
            if i < cfg.depth - 1:
                self.downs.append(ConvBlock(rng, c, c, dtype, f"down{i}"))
        self.middle = [ResBlock(rng, ch[-1], ch[-1], dtype, f"mid{j}") for j in range(2)]
        self.ups = []
        self.fusers = []
        for i in range(cfg.depth - 2, -1, -1):
            self.ups.append(ConvBlock(rng, ch[i + 1], ch[i], dtype, f"up{i}"))
            self.fusers.append(ResBlock(rng, 2 * ch[i], ch[i], dtype, f"fuse{i}"))
        head_in = ch[0]
        self.head_occ_w, self.head_occ_b = init_conv_weight(
            rng, head_in, 1, dtype, "head_occ", zero=True)
        self.head_mu_w, self.head_mu_b = init_conv_weight(
            rng, head_in, FEATURE_DIM, dtype, "head_mu", zero=True)
        self.train_mode = True

    def train(self) -> None:
        self.train_mode = True

    def eval(self) -> None:
        self.train_mode = False

    def modules(self):
        return ([self.stem] + self.encoders + self.downs + self.middle
                + self.ups + self.fusers)

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for m in self.modules():
            params.extend(m.parameters())
        params += [self.head_occ_w, self.head_occ_b, self.head_mu_w, self.head_mu_b]
        return params

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [(p.name, p) for p in self.parameters()]

    def batchnorms(self):
        out = []
        for m in self.modules():
            if isinstance(m, ConvBlock):
                out.append(m.bn)
            elif isinstance(m, ResBlock):
                out.extend([m.bn1, m.bn2])
        return out

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, ctx: CoordContext, values: np.ndarray | Tensor
                ) -> tuple[Tensor, Tensor]:
        """Run the network over the level-0 coordinate set of `ctx`.

        values: (n0, INPUT_CHANNELS) input features.  Returns (occupancy
        logits (n0,1), feature means (n0,K)), defined exactly on the
        evaluation coordinates.
        """
        train = self.train_mode
        x = values if isinstance(values, Tensor) else Tensor(np.asarray(values, dtype=self.dtype))
        h = self.stem(x, ctx.same(0), train)
        skips = []
        for i, enc in enumerate(self.encoders):
            h = enc(h, ctx.same(i), train)
            if i < self.cfg.depth - 1:
                skips.append(h)
                h = self.downs[i](h, ctx.down(i), train)
        for mid in self.middle:
            h = mid(h, ctx.same(self.cfg.depth - 1), train)
        for j, (up, fuse) in enumerate(zip(self.ups, self.fusers)):
            level = self.cfg.depth - 2 - j
            h = up(h, ctx.up(level), train)
            h = fuse(concat(h, skips[level]), ctx.same(level), train)
        logit = sparse_conv(h, self.head_occ_w, self.head_occ_b, ctx.same(0))
        mu = sparse_conv(h, self.head_mu_w, self.head_mu_b, ctx.same(0))
        return logit, mu


def build_model(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> TransitionKernelModel:
    return TransitionKernelModel(cfg, seed=seed, dtype=dtype)


def assemble_inputs(eval_coords: np.ndarray, state_coords: np.ndarray,
                    state_features: np.ndarray, mask_coords: np.ndarray,
                    resolution: int, dtype=np.float32) -> np.ndarray:
    """Build the (n,10) network input block over the evaluation set.

    Channels: K state features (zero off-support), occupancy bit, and the
    conditioning-mask bit.
    """
    from ..voxelize import pack_coords  # local import to avoid a cycle

    n = len(eval_coords)
    out = np.zeros((n, INPUT_CHANNELS), dtype=dtype)
    ek = pack_coords(np.asarray(eval_coords, dtype=np.int64), resolution)
    order = np.argsort(ek)
    sorted_ek = ek[order]

    def rows_of(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k = pack_coords(np.asarray(coords, dtype=np.int64), resolution)
        pos = np.searchsorted(sorted_ek, k)
        pos_c = np.minimum(pos, n - 1) if n else pos
        hit = sorted_ek[pos_c] == k if n else np.zeros(len(k), dtype=bool)
        return order[pos_c[hit]], hit

    if len(state_coords):
        rows, hit = rows_of(state_coords)
        out[rows, :FEATURE_DIM] = state_features[hit].astype(dtype)
        out[rows, FEATURE_DIM] = 1.0
    if len(mask_coords):
        rows, _ = rows_of(mask_coords)
        out[rows, FEATURE_DIM + 1] = 1.0
    return out


def forward_unet(model: TransitionKernelModel, state: SparseTensor,
                 conditioning_mask: np.ndarray, eval_coords: np.ndarray,
                 resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Convenience wrapper: assemble inputs, run the net, squash the logit.

    Returns (lambda (n,), mu (n,K)) numpy arrays over eval_coords.
    """
    values = assemble_inputs(eval_coords, state.coords, state.values.data,
                             conditioning_mask, resolution, dtype=model.dtype)
    ctx = CoordContext(eval_coords, resolution, model.cfg.depth)
    logit, mu = model.forward(ctx, values)
    lam = 1.0 / (1.0 + np.exp(-logit.data[:, 0].astype(np.float64)))
    return lam, mu.data.copy()

"""Sparse tensors, kernel maps, and the sparse 3^3 convolution primitive.

A SparseTensor is an explicit active-coordinate set plus per-cell values.
Convolutions are driven by kernel maps: per kernel offset, the pairs of
(input row, output row) whose coordinates line up.  Within one offset both
index lists are duplicate-free, so gather/GEMM/scatter runs collision-free
with plain fancy indexing.  Three map modes cover the network:

  same:  out = in coords (submanifold behavior on the evaluation set)
  down:  out at half resolution, in at 2*out + offset
  up:    transposed counterpart, out at the recorded finer coordinate set
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .autodiff import Tensor

KERNEL_OFFSETS = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1],
                                      indexing="ij"), axis=-1).reshape(-1, 3)  # (27,3)
KERNEL_VOLUME = 27


class SparseTensor:
    """Active cells (n,3) plus per-cell feature values (n,C) at one stride."""

    __slots__ = ("coords", "values", "stride")

    def __init__(self, coords: np.ndarray, values: Tensor | np.ndarray, stride: int = 1):
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        self.values = values if isinstance(values, Tensor) else Tensor(values)
        self.stride = stride
        if len(self.coords) != len(self.values.data):
            raise DimensionError("coords/values length mismatch")


def _pack(coords: np.ndarray, span: int) -> np.ndarray:
    """Collision-free packing of coords in [-1, span+1) into int64 keys."""
    m = span + 2
    c = coords.astype(np.int64) + 1
    return (c[:, 0] * m + c[:, 1]) * m + c[:, 2]


class KernelMap:
    """Per-offset (input rows, output rows) index pairs for one coord pair."""

    __slots__ = ("pairs", "n_in", "n_out", "_fwd_idx", "_bwd_idx")

    def __init__(self, pairs: list[tuple[np.ndarray, np.ndarray]], n_in: int, n_out: int):
        self.pairs = pairs
        self.n_in = n_in
        self.n_out = n_out
        self._fwd_idx = None
        self._bwd_idx = None

    def forward_index(self) -> np.ndarray:
        """Flat (n_out*27,) gather rows into the padded input; row n_in = zero."""
        if self._fwd_idx is None:
            table = np.full((self.n_out, KERNEL_VOLUME), self.n_in, dtype=np.intp)
            for k, (in_idx, out_idx) in enumerate(self.pairs):
                if len(in_idx):
                    table[out_idx, k] = in_idx
            self._fwd_idx = table.ravel()
        return self._fwd_idx

    def backward_index(self) -> np.ndarray:
        """Flat (n_in*27,) gather rows into the padded grad; row n_out = zero."""
        if self._bwd_idx is None:
            table = np.full((self.n_in, KERNEL_VOLUME), self.n_out, dtype=np.intp)
            for k, (in_idx, out_idx) in enumerate(self.pairs):
                if len(in_idx):
                    table[in_idx, k] = out_idx
            self._bwd_idx = table.ravel()
        return self._bwd_idx


def _build_map(in_coords: np.ndarray, out_coords: np.ndarray, span: int,
               mode: str) -> KernelMap:
    """Kernel map for `mode` in {same, down, up}.

    same: input cell at out + d;  down: input at 2*out + d;  up: output at
    2*in + d.  All lookups are exact coordinate matches.
    """
    n_in, n_out = len(in_coords), len(out_coords)
    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    if n_in == 0 or n_out == 0:
        empty = np.zeros(0, dtype=np.int64)
        return KernelMap([(empty, empty)] * KERNEL_VOLUME, n_in, n_out)

    if mode == "up":
        # iterate from the input side: each input contributes to out = 2*in + d
        out_keys = _pack(out_coords, span)
        order = np.argsort(out_keys)
        sorted_keys = out_keys[order]
        for d in KERNEL_OFFSETS:
            targets = _pack(in_coords * 2 + d, span)
            pos = np.searchsorted(sorted_keys, targets)
            pos_c = np.minimum(pos, n_out - 1)
            hit = sorted_keys[pos_c] == targets
            pairs.append((np.nonzero(hit)[0].astype(np.int64),
                          order[pos_c[hit]].astype(np.int64)))
        return KernelMap(pairs, n_in, n_out)

    in_keys = _pack(in_coords, span)
    order = np.argsort(in_keys)
    sorted_keys = in_keys[order]
    base = out_coords * 2 if mode == "down" else out_coords
    for d in KERNEL_OFFSETS:
        targets = _pack(base + d, span)
        pos = np.searchsorted(sorted_keys, targets)
        pos_c = np.minimum(pos, n_in - 1)
        hit = sorted_keys[pos_c] == targets
        pairs.append((order[pos_c[hit]].astype(np.int64),
                      np.nonzero(hit)[0].astype(np.int64)))
    return KernelMap(pairs, n_in, n_out)


class CoordContext:
    """Per-step coordinate sets for every level plus lazily built kernel maps.

    Level 0 is the evaluation set (the GCA neighborhood); level i+1 holds the
    unique floor-halved coords of level i.  All convolutions within a forward
    pass share these maps.
    """

    def __init__(self, coords: np.ndarray, resolution: int, depth: int):
        self.resolution = resolution
        self.levels = [np.asarray(coords, dtype=np.int64).reshape(-1, 3)]
        for _ in range(depth - 1):
            prev = self.levels[-1]
            if len(prev):
                span = self.levels_span(len(self.levels) - 1)
                keys = _pack(prev // 2, span)
                _, idx = np.unique(keys, return_index=True)
                self.levels.append((prev // 2)[np.sort(idx)])
            else:
                self.levels.append(prev)
        self._same: dict[int, KernelMap] = {}
        self._down: dict[int, KernelMap] = {}
        self._up: dict[int, KernelMap] = {}

    def levels_span(self, level: int) -> int:
        return max(2, self.resolution >> level)

    def coords_at(self, level: int) -> np.ndarray:
        return self.levels[level]

    def same(self, level: int) -> KernelMap:
        if level not in self._same:
            c = self.levels[level]
            self._same[level] = _build_map(c, c, self.levels_span(level), "same")
        return self._same[level]

    def down(self, level: int) -> KernelMap:
        """Map from level -> level+1 (stride-2 convolution)."""
        if level not in self._down:
            self._down[level] = _build_map(self.levels[level], self.levels[level + 1],
                                           self.levels_span(level), "down")
        return self._down[level]

    def up(self, level: int) -> KernelMap:
        """Map from level+1 -> level (transposed stride-2 convolution)."""
        if level not in self._up:
            self._up[level] = _build_map(self.levels[level + 1], self.levels[level],
                                         self.levels_span(level), "up")
        return self._up[level]


def sparse_conv(values: Tensor, weight: Tensor, bias: Tensor | None,
                kmap: KernelMap) -> Tensor:
    """Sparse 3^3 convolution: out[j] = sum_d in[i(j,d)] @ W[d] (+ bias).

    weight has shape (27, Cin, Cout); absent inputs contribute zero.  The
    kernel map fixes the output coordinate set.  Internally the gathered
    neighborhoods form one (n_out, 27*Cin) block so each call is a single
    GEMM; within an offset the row indices are duplicate-free, so the
    gather/scatter steps never collide.
    """
    w = weight.data
    if w.ndim != 3 or w.shape[0] != KERNEL_VOLUME:
        raise DimensionError("weight must have shape (27, Cin, Cout)")
    if values.data.shape[1] != w.shape[1]:
        raise DimensionError(
            f"channel mismatch: input {values.data.shape[1]}, weight {w.shape[1]}")
    c_in, c_out = w.shape[1], w.shape[2]
    x = values.data
    x_pad = np.concatenate([x, np.zeros((1, c_in), dtype=x.dtype)], axis=0)
    col = x_pad.take(kmap.forward_index(), axis=0).reshape(
        kmap.n_out, KERNEL_VOLUME * c_in)
    out = col @ w.reshape(KERNEL_VOLUME * c_in, c_out)
    if bias is not None:
        out += bias.data

    parents = (values, weight) + ((bias,) if bias is not None else ())
    saved = [col]

    def backward_fn(grad: np.ndarray) -> None:
        weight.accumulate((saved[0].T @ grad).reshape(w.shape))
        saved[0] = None  # free the gathered block as soon as possible
        # dx is the transposed convolution: gather grad rows per offset, one
        # GEMM against the (27*Cout, Cin) transposed kernel.
        g_pad = np.concatenate(
            [grad, np.zeros((1, c_out), dtype=grad.dtype)], axis=0)
        gcol = g_pad.take(kmap.backward_index(), axis=0).reshape(
            kmap.n_in, KERNEL_VOLUME * c_out)
        values.accumulate(gcol @ w.transpose(0, 2, 1).reshape(
            KERNEL_VOLUME * c_out, c_in))
        if bias is not None:
            bias.accumulate(grad.sum(axis=0))

    return Tensor(out, parents, backward_fn)

"""Autodiff, sparse convolution, layers, network assembly, optimizer, model I/O."""
import numpy as np
import pytest

from splatforge.errors import DimensionError, FormatError, ParameterError, StateError
from splatforge.net.autodiff import Parameter, Tensor, backward
from splatforge.net.layers import BatchNorm, ConvBlock, ResBlock, add, concat, relu
from splatforge.net.optim import AdamW
from splatforge.net.serialize import deserialize_model, serialize_model
from splatforge.net.sparse import (
    KERNEL_OFFSETS, KERNEL_VOLUME, CoordContext, KernelMap, sparse_conv,
)
from splatforge.net.unet import (
    INPUT_CHANNELS, NetworkConfig, TransitionKernelModel, assemble_inputs,
    build_model,
)


# ---------------------------------------------------------------------------
# autodiff core
# ---------------------------------------------------------------------------

def test_backward_diamond_graph_accumulates_paths():
    x = Tensor(np.array([2.0, 3.0]))
    y = add(x, x)            # dy/dx = 2 along two paths
    z = add(y, x)            # dz/dx = 3 in total
    backward([(z, np.ones(2))])
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_backward_accumulates_across_separate_graphs():
    # per-step losses built on fresh graphs sum into the shared leaf
    x = Tensor(np.array([1.0, -2.0]))
    backward([(relu(x), np.ones(2))])
    backward([(relu(x), np.ones(2))])
    np.testing.assert_array_equal(x.grad, [2.0, 0.0])


def test_backward_validates_roots():
    with pytest.raises(StateError):
        backward([])
    x = Tensor(np.zeros(3))
    with pytest.raises(StateError):
        backward([(x, np.zeros(2))])


def test_detach_breaks_graph():
    x = Tensor(np.array([1.0]))
    y = relu(x).detach()
    z = add(y, Tensor(np.array([1.0])))
    backward([(z, np.ones(1))])
    assert x.grad is None


# ---------------------------------------------------------------------------
# kernel maps vs brute-force coordinate lookup
# ---------------------------------------------------------------------------

def _brute_pairs(in_coords, out_coords, mode):
    index = {tuple(c): i for i, c in enumerate(np.asarray(in_coords).tolist())}
    out_index = {tuple(c): j for j, c in enumerate(np.asarray(out_coords).tolist())}
    pairs = []
    for d in KERNEL_OFFSETS:
        ins, outs = [], []
        if mode == "up":
            for i, c in enumerate(np.asarray(in_coords).tolist()):
                tgt = tuple(int(v) for v in (2 * np.asarray(c) + d))
                if tgt in out_index:
                    ins.append(i)
                    outs.append(out_index[tgt])
        else:
            for j, c in enumerate(np.asarray(out_coords).tolist()):
                mul = 2 if mode == "down" else 1
                src = tuple(int(v) for v in (mul * np.asarray(c) + d))
                if src in index:
                    ins.append(index[src])
                    outs.append(j)
        pairs.append((np.asarray(ins, dtype=np.int64), np.asarray(outs, dtype=np.int64)))
    return pairs


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_coord_context_maps_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    coords = np.unique(rng.integers(0, 8, (60, 3)), axis=0)
    ctx = CoordContext(coords, 8, depth=2)
    c0, c1 = ctx.coords_at(0), ctx.coords_at(1)
    # level 1 holds unique floor-halved coords (first-occurrence order)
    seen, expect = set(), []
    for c in (c0 // 2).tolist():
        if tuple(c) not in seen:
            seen.add(tuple(c))
            expect.append(c)
    np.testing.assert_array_equal(c1, np.asarray(expect))

    for kmap, pairs in ((ctx.same(0), _brute_pairs(c0, c0, "same")),
                        (ctx.down(0), _brute_pairs(c0, c1, "down")),
                        (ctx.up(0), _brute_pairs(c1, c0, "up"))):
        for k in range(KERNEL_VOLUME):
            got_i, got_o = kmap.pairs[k]
            order = np.argsort(got_o if len(got_o) else got_i)
            want_i, want_o = pairs[k]
            worder = np.argsort(want_o if len(want_o) else want_i)
            np.testing.assert_array_equal(got_i[order], want_i[worder])
            np.testing.assert_array_equal(got_o[order], want_o[worder])


def test_coord_context_caches_maps():
    coords = np.array([[0, 0, 0], [1, 1, 1]])
    ctx = CoordContext(coords, 4, depth=2)
    assert ctx.same(0) is ctx.same(0)
    assert ctx.down(0) is ctx.down(0)
    assert ctx.up(0) is ctx.up(0)


# ---------------------------------------------------------------------------
# sparse convolution: dense oracle + finite differences
# ---------------------------------------------------------------------------

def _dense_conv_same(x_dense, weight):
    """Naive dense conv on a full grid: out[p] = sum_k x[p + d_k] @ W[k]."""
    r = x_dense.shape[0]
    c_out = weight.shape[2]
    out = np.zeros(x_dense.shape[:3] + (c_out,), dtype=x_dense.dtype)
    for k, d in enumerate(KERNEL_OFFSETS):
        for p in np.ndindex(r, r, r):
            q = np.asarray(p) + d
            if np.all(q >= 0) and np.all(q < r):
                out[p] += x_dense[tuple(q)] @ weight[k]
    return out


def test_sparse_conv_matches_dense_oracle_on_full_grid():
    rng = np.random.default_rng(0)
    r, c_in, c_out = 4, 3, 5
    coords = np.stack(np.meshgrid(*([np.arange(r)] * 3), indexing="ij"),
                      axis=-1).reshape(-1, 3)
    x = rng.normal(size=(len(coords), c_in))
    w = rng.normal(size=(KERNEL_VOLUME, c_in, c_out))
    b = rng.normal(size=c_out)
    ctx = CoordContext(coords, r, depth=1)
    out = sparse_conv(Tensor(x), Tensor(w), Tensor(b), ctx.same(0))
    dense = _dense_conv_same(x.reshape(r, r, r, c_in), w) + b
    np.testing.assert_allclose(out.data.reshape(r, r, r, c_out), dense, atol=1e-12)


def test_sparse_conv_finite_difference_gradients():
    rng = np.random.default_rng(1)
    coords = np.unique(rng.integers(0, 5, (30, 3)), axis=0)
    n, c_in, c_out = len(coords), 3, 2
    x0 = rng.normal(size=(n, c_in))
    w0 = rng.normal(size=(KERNEL_VOLUME, c_in, c_out))
    b0 = rng.normal(size=c_out)
    g = rng.normal(size=(n, c_out))
    kmap = CoordContext(coords, 5, depth=1).same(0)

    def run(x, w, b):
        return sparse_conv(Tensor(x), Tensor(w), Tensor(b), kmap)

    xt, wt, bt = Tensor(x0.copy()), Tensor(w0.copy()), Tensor(b0.copy())
    out = sparse_conv(xt, wt, bt, kmap)
    backward([(out, g)])

    eps = 1e-6
    for arr, tensor in ((x0, xt), (w0, wt), (b0, bt)):
        flat = arr.reshape(-1)
        gflat = tensor.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(12, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            plus = float((run(x0, w0, b0).data * g).sum())
            flat[i] = old - eps
            minus = float((run(x0, w0, b0).data * g).sum())
            flat[i] = old
            fd = (plus - minus) / (2 * eps)
            np.testing.assert_allclose(gflat[i], fd, rtol=1e-6, atol=1e-9)


def test_sparse_conv_down_up_modes_match_brute_force():
    rng = np.random.default_rng(2)
    coords = np.unique(rng.integers(0, 6, (40, 3)), axis=0)
    ctx = CoordContext(coords, 6, depth=2)
    c0, c1 = ctx.coords_at(0), ctx.coords_at(1)
    x0 = rng.normal(size=(len(c0), 2))
    x1 = rng.normal(size=(len(c1), 2))
    w = rng.normal(size=(KERNEL_VOLUME, 2, 3))

    down = sparse_conv(Tensor(x0), Tensor(w), None, ctx.down(0)).data
    want = np.zeros((len(c1), 3))
    lut = {tuple(c): i for i, c in enumerate(c0.tolist())}
    for j, c in enumerate(c1.tolist()):
        for k, d in enumerate(KERNEL_OFFSETS):
            src = tuple(int(v) for v in (2 * np.asarray(c) + d))
            if src in lut:
                want[j] += x0[lut[src]] @ w[k]
    np.testing.assert_allclose(down, want, atol=1e-12)

    up = sparse_conv(Tensor(x1), Tensor(w), None, ctx.up(0)).data
    want_up = np.zeros((len(c0), 3))
    lut0 = {tuple(c): j for j, c in enumerate(c0.tolist())}
    for i, c in enumerate(c1.tolist()):
        for k, d in enumerate(KERNEL_OFFSETS):
            tgt = tuple(int(v) for v in (2 * np.asarray(c) + d))
            if tgt in lut0:
                want_up[lut0[tgt]] += x1[i] @ w[k]
    np.testing.assert_allclose(up, want_up, atol=1e-12)


def test_sparse_conv_validates_shapes():
    coords = np.array([[0, 0, 0]])
    kmap = CoordContext(coords, 2, depth=1).same(0)
    with pytest.raises(DimensionError):
        sparse_conv(Tensor(np.zeros((1, 3))), Tensor(np.zeros((5, 3, 2))), None, kmap)
    with pytest.raises(DimensionError):
        sparse_conv(Tensor(np.zeros((1, 4))), Tensor(np.zeros((27, 3, 2))), None, kmap)


def test_sparse_conv_empty_input():
    kmap = KernelMap([(np.zeros(0, np.int64), np.zeros(0, np.int64))] * KERNEL_VOLUME,
                     0, 0)
    out = sparse_conv(Tensor(np.zeros((0, 3))), Tensor(np.zeros((27, 3, 2))),
                      Tensor(np.zeros(2)), kmap)
    assert out.data.shape == (0, 2)


# ---------------------------------------------------------------------------
# elementwise layers and batch norm
# ---------------------------------------------------------------------------

def test_concat_splits_gradient():
    a, b = Tensor(np.ones((3, 2))), Tensor(np.ones((3, 4)))
    out = concat(a, b)
    assert out.data.shape == (3, 6)
    g = np.arange(18, dtype=np.float64).reshape(3, 6)
    backward([(out, g)])
    np.testing.assert_array_equal(a.grad, g[:, :2])
    np.testing.assert_array_equal(b.grad, g[:, 2:])
    with pytest.raises(DimensionError):
        concat(Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))))
    with pytest.raises(DimensionError):
        add(Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))))


def test_batchnorm_train_normalizes_and_updates_running_stats():
    rng = np.random.default_rng(3)
    bn = BatchNorm(4, dtype=np.float64)
    x = rng.normal(loc=3.0, scale=2.0, size=(50, 4))
    out = bn(Tensor(x), train=True)
    np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.std(axis=0), 1.0, atol=1e-3)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0), atol=1e-10)
    np.testing.assert_allclose(
        bn.running_var, 0.9 * 1.0 + 0.1 * x.var(axis=0, ddof=1), atol=1e-10)


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNorm(2, dtype=np.float64)
    bn.running_mean = np.array([1.0, -1.0])
    bn.running_var = np.array([4.0, 0.25])
    x = np.array([[3.0, 0.0], [1.0, -1.0]])
    out = bn(Tensor(x), train=False)
    want = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    np.testing.assert_allclose(out.data, want, atol=1e-9)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_finite_difference(train):
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(9, 3))
    g = rng.normal(size=(9, 3))

    def fresh_bn():
        bn = BatchNorm(3, dtype=np.float64)
        bn.gamma.data = np.array([1.5, 0.5, -2.0])
        bn.beta.data = np.array([0.1, -0.2, 0.3])
        bn.running_mean = np.array([0.5, -0.5, 1.0])
        bn.running_var = np.array([2.0, 1.0, 0.5])
        return bn

    def loss(x):
        bn = fresh_bn()
        return float((bn(Tensor(x), train=train).data * g).sum())

    bn = fresh_bn()
    xt = Tensor(x0.copy())
    out = bn(xt, train=train)
    backward([(out, g)])

    eps = 1e-6
    flat = x0.reshape(-1)
    gflat = xt.grad.reshape(-1)
    for i in rng.choice(flat.size, size=10, replace=False):
        old = flat[i]
        flat[i] = old + eps
        plus = loss(x0)
        flat[i] = old - eps
        minus = loss(x0)
        flat[i] = old
        fd = (plus - minus) / (2 * eps)
        np.testing.assert_allclose(gflat[i], fd, rtol=1e-5, atol=1e-8)
    # parameter grads too
    for p, want in ((bn.gamma, "gamma"), (bn.beta, "beta")):
        assert p.grad is not None and p.grad.shape == (3,)


def test_resblock_identity_skip_when_channels_match():
    rng = np.random.default_rng(5)
    blk = ResBlock(rng, 4, 4, np.float64, "blk")
    assert blk.skip_w is None
    blk2 = ResBlock(rng, 3, 4, np.float64, "blk2")
    assert blk2.skip_w is not None and blk2.skip_w.data.shape == (3, 4)


# ---------------------------------------------------------------------------
# network assembly
# ---------------------------------------------------------------------------

def test_network_config_channel_plan():
    cfg = NetworkConfig(base_channels=16, channel_mult=2, depth=3)
    assert cfg.level_channels == (32, 64, 128)
    with pytest.raises(ParameterError):
        NetworkConfig(depth=0)
    with pytest.raises(ParameterError):
        NetworkConfig(base_channels=0)


def test_fresh_model_heads_output_exact_zero():
    rng = np.random.default_rng(6)
    cfg = NetworkConfig(base_channels=4, channel_mult=2, depth=2)
    model = build_model(cfg, seed=0, dtype=np.float64)
    coords = np.unique(rng.integers(0, 8, (30, 3)), axis=0)
    ctx = CoordContext(coords, 8, cfg.depth)
    values = rng.normal(size=(len(coords), INPUT_CHANNELS))
    logit, mu = model.forward(ctx, values)
    np.testing.assert_array_equal(logit.data, 0.0)
    np.testing.assert_array_equal(mu.data, 0.0)
    assert logit.data.shape == (len(coords), 1)
    assert mu.data.shape == (len(coords), 8)


def test_model_deterministic_by_seed():
    cfg = NetworkConfig(base_channels=4, depth=1)
    a = build_model(cfg, seed=7)
    b = build_model(cfg, seed=7)
    c = build_model(cfg, seed=8)
    for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert any(not np.array_equal(pa.data, pc.data)
               for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters()))


def test_model_parameter_names_unique():
    model = build_model(NetworkConfig(base_channels=4, depth=2))
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert model.param_count() == sum(p.data.size for _, p in model.named_parameters())


def test_assemble_inputs_channels():
    coords = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    state_coords = coords[[1, 2]]
    feats = np.array([[1.0] * 8, [2.0] * 8], dtype=np.float32)
    mask = coords[[0, 2]]
    out = assemble_inputs(coords, state_coords, feats, mask, 4, dtype=np.float64)
    assert out.shape == (4, INPUT_CHANNELS)
    np.testing.assert_array_equal(out[:, 8], [0, 1, 1, 0])       # occupancy bit
    np.testing.assert_array_equal(out[:, 9], [1, 0, 1, 0])       # mask bit
    np.testing.assert_array_equal(out[1, :8], np.ones(8))
    np.testing.assert_array_equal(out[2, :8], np.full(8, 2.0))
    np.testing.assert_array_equal(out[0, :8], np.zeros(8))       # off-support zero
    # state cells outside the evaluation set are ignored
    out2 = assemble_inputs(coords[:2], state_coords, feats,
                           np.zeros((0, 3), np.int64), 4)
    np.testing.assert_array_equal(out2[:, 8], [0, 1])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_adamw_matches_manual_reference():
    rng = np.random.default_rng(7)
    theta0 = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(3)]
    lr, wd, b1, b2, eps = 1e-2, 1e-2, 0.9, 0.999, 1e-8

    p = Parameter(theta0.copy(), "p")
    opt = AdamW([p], lr=lr, weight_decay=wd, betas=(b1, b2), eps=eps)
    for g in grads:
        p.grad = g.copy()
        opt.step()

    theta = theta0.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
        theta = theta - lr * wd * theta
    np.testing.assert_allclose(p.data, theta, atol=1e-12)


def test_adamw_treats_missing_grad_as_zero():
    p = Parameter(np.ones(3), "p")
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    np.testing.assert_array_equal(p.data, np.ones(3))
    opt.zero_grad()
    assert p.grad is None


# ---------------------------------------------------------------------------
# model serialization
# ---------------------------------------------------------------------------

def test_model_serialize_round_trip_bit_exact():
    model = build_model(NetworkConfig(base_channels=4, depth=2), seed=3)
    # give running stats non-default values
    for bn in model.batchnorms():
        bn.running_mean = bn.running_mean + 0.25
        bn.running_var = bn.running_var * 1.5
    blob = serialize_model(model)
    back = deserialize_model(blob)
    assert serialize_model(back) == blob
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    for bn1, bn2 in zip(model.batchnorms(), back.batchnorms()):
        np.testing.assert_array_equal(bn1.running_mean, bn2.running_mean)
        np.testing.assert_array_equal(bn1.running_var, bn2.running_var)
    assert back.cfg == model.cfg


def test_model_deserialize_rejects_corruption():
    blob = serialize_model(build_model(NetworkConfig(base_channels=4, depth=1)))
    with pytest.raises(FormatError):
        deserialize_model(b"XXXX" + blob[4:])
    bad_version = blob[:4] + (99).to_bytes(4, "little") + blob[8:]
    with pytest.raises(FormatError):
        deserialize_model(bad_version)
    with pytest.raises(FormatError):
        deserialize_model(blob + b"\x00")

"""Splat point-file parsing, serialization, and transforms."""
import numpy as np
import pytest

from splatforge.errors import FormatError, UnsupportedTransformError, ValidationError
from splatforge.splat_io import (
    SplatCloud, Transform, clip_scales, concat_clouds, parse_feature_sidecar,
    parse_splat_file, serialize_feature_sidecar, serialize_splat_file,
    transform_cloud,
)
from splatforge import sh
from synthetic_data import random_cloud, random_unit_quats


def test_serialize_parse_recovers_arrays():
    cloud = random_cloud(seed=1, n=50)
    data = serialize_splat_file(cloud)
    back = parse_splat_file(data)
    assert len(back) == 50
    np.testing.assert_array_equal(back.positions, cloud.positions)
    np.testing.assert_array_equal(back.log_scales, cloud.log_scales)
    np.testing.assert_array_equal(back.opacity_logits, cloud.opacity_logits)
    np.testing.assert_array_equal(back.sh_coeffs, cloud.sh_coeffs)
    # quaternions renormalize on load; ours are unit already
    np.testing.assert_allclose(back.rotations, cloud.rotations, atol=1e-6)


def test_parse_serialize_bit_exact():
    for seed in range(6):
        data = serialize_splat_file(random_cloud(seed=seed, n=20 + seed))
        assert serialize_splat_file(parse_splat_file(data)) == data


def test_header_with_comments_and_extra_fields_round_trips():
    cloud = random_cloud(seed=3, n=8)
    base = serialize_splat_file(cloud)
    count, _, offset = 8, None, base.find(b"end_header\n") + len(b"end_header\n")
    header = base[:offset].decode("ascii")
    # inject comments and a trailing extra property backed by widened records
    lines = header.rstrip("\n").split("\n")
    lines.insert(1, "comment produced by an external exporter")
    lines.insert(-1, "property float extra_0")
    new_header = ("\n".join(lines) + "\n").encode("ascii")
    old = np.frombuffer(base[offset:], dtype=np.dtype([(f"f{i}", "<f4") for i in range(62)]))
    widened = np.zeros(count, dtype=np.dtype([(f"f{i}", "<f4") for i in range(63)]))
    for i in range(62):
        widened[f"f{i}"] = old[f"f{i}"]
    widened["f62"] = np.arange(count, dtype=np.float32)
    data = new_header + widened.tobytes()
    back = parse_splat_file(data)
    assert serialize_splat_file(back) == data
    np.testing.assert_array_equal(back.positions, cloud.positions)


def test_empty_cloud_round_trips():
    data = serialize_splat_file(SplatCloud.empty())
    back = parse_splat_file(data)
    assert len(back) == 0
    assert serialize_splat_file(back) == data


def test_parse_rejects_bad_inputs():
    good = serialize_splat_file(random_cloud(seed=0, n=4))
    with pytest.raises(FormatError):
        parse_splat_file(b"not a ply file")
    with pytest.raises(FormatError):
        parse_splat_file(good[:-7])  # truncated payload
    with pytest.raises(FormatError):
        parse_splat_file(good + b"\x00\x00")  # trailing bytes
    with pytest.raises(FormatError):
        parse_splat_file(good.replace(b"binary_little_endian", b"ascii_little_endian1"))
    with pytest.raises(FormatError):
        parse_splat_file(good.replace(b"property float x\n", b"property float xx\n"))


def test_parse_rejects_non_finite_and_zero_quats():
    cloud = random_cloud(seed=0, n=4)
    bad = serialize_splat_file(
        SplatCloud(**{**cloud.__dict__, "positions": cloud.positions.copy()}))
    # poke a NaN into the first float of the payload
    offset = bad.find(b"end_header\n") + len(b"end_header\n")
    arr = bytearray(bad)
    arr[offset:offset + 4] = np.float32(np.nan).tobytes()
    with pytest.raises(ValidationError):
        serialize_splat_file(SplatCloud(**{**cloud.__dict__,
                                           "positions": cloud.positions * np.nan}))
    with pytest.raises(FormatError):
        parse_splat_file(bytes(arr))
    zq = cloud.rotations.copy()
    zq[2] = 0.0
    with pytest.raises(FormatError):
        parse_splat_file(serialize_splat_file(
            SplatCloud(**{**cloud.__dict__, "rotations": zq})))


def test_quaternions_renormalized_on_load():
    cloud = random_cloud(seed=5, n=6)
    scaled = SplatCloud(**{**cloud.__dict__, "rotations": cloud.rotations * 3.0})
    back = parse_splat_file(serialize_splat_file(scaled))
    np.testing.assert_allclose(np.linalg.norm(back.rotations, axis=1), 1.0, atol=1e-6)


def test_select_drops_records_and_copies():
    cloud = parse_splat_file(serialize_splat_file(random_cloud(seed=2, n=10)))
    sub = cloud.select(np.array([3, 1, 7]))
    assert sub._records is None and len(sub) == 3
    np.testing.assert_array_equal(sub.positions, cloud.positions[[3, 1, 7]])
    sub.positions += 1.0
    assert not np.allclose(sub.positions[0], cloud.positions[3])


def test_concat_clouds():
    a, b = random_cloud(seed=0, n=3), random_cloud(seed=1, n=5)
    cat = concat_clouds([a, b])
    assert len(cat) == 8
    np.testing.assert_array_equal(cat.positions[:3], a.positions)
    np.testing.assert_array_equal(cat.positions[3:], b.positions)
    assert len(concat_clouds([])) == 0


def test_clip_scales_caps_extents():
    cloud = random_cloud(seed=4, n=12)
    big = SplatCloud(**{**cloud.__dict__,
                        "log_scales": cloud.log_scales + 10.0})
    out = clip_scales(big, voxel_size=0.25)
    assert np.all(out.log_scales <= np.log(0.5) + 1e-6)
    untouched = clip_scales(cloud, voxel_size=1e9)
    assert untouched is cloud
    with pytest.raises(ValidationError):
        clip_scales(cloud, voxel_size=0.0)


def _rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def test_transform_cloud_positions_scales_quats():
    cloud = random_cloud(seed=6, n=20)
    tf = Transform.from_parts(rotation=_rot_z(0.7), translation=(1.0, -2.0, 0.5),
                              scale=2.0)
    out = transform_cloud(cloud, tf)
    expect = 2.0 * cloud.positions @ _rot_z(0.7).T + np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(out.positions, expect.astype(np.float32), atol=1e-5)
    np.testing.assert_allclose(out.log_scales, cloud.log_scales + np.log(2.0),
                               atol=1e-5)
    np.testing.assert_allclose(np.linalg.norm(out.rotations, axis=1), 1.0, atol=1e-6)
    # rotated covariance axes: R_out == R_tf @ R_in as rotation matrices
    r_in = sh.quat_to_matrix(cloud.rotations[0].astype(np.float64))
    r_out = sh.quat_to_matrix(out.rotations[0].astype(np.float64))
    np.testing.assert_allclose(r_out, _rot_z(0.7) @ r_in, atol=1e-5)


def test_transform_cloud_rotates_sh_radiance():
    """Rotating a cloud must carry its view-dependent color along: evaluating
    the rotated coefficients in rotated directions reproduces the original."""
    cloud = random_cloud(seed=7, n=5)
    rot = _rot_z(1.1) @ np.array([[1, 0, 0], [0, 0, -1.0], [0, 1, 0]])
    out = transform_cloud(cloud, Transform.from_parts(rotation=rot))
    dirs = np.random.default_rng(0).normal(size=(40, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    before = sh.eval_sh(cloud.sh_coeffs[2].astype(np.float64), dirs)
    after = sh.eval_sh(out.sh_coeffs[2].astype(np.float64), dirs @ rot.T)
    np.testing.assert_allclose(after, before, atol=5e-3)


def test_transform_identity_returns_same_object():
    cloud = random_cloud(seed=8, n=4)
    assert transform_cloud(cloud, Transform.identity()) is cloud


def test_transform_rejects_improper_rotation():
    cloud = random_cloud(seed=9, n=4)
    with pytest.raises(UnsupportedTransformError):
        transform_cloud(cloud, Transform.from_parts(rotation=np.diag([1, 1, -1.0])))
    with pytest.raises(UnsupportedTransformError):
        transform_cloud(cloud, Transform.from_parts(rotation=np.eye(3) * 2.0))
    with pytest.raises(UnsupportedTransformError):
        transform_cloud(cloud, Transform.from_parts(scale=-1.0))


def test_transform_compose_matches_sequential():
    a = Transform.from_parts(rotation=_rot_z(0.3), translation=(1, 0, 0), scale=1.5)
    b = Transform.from_parts(rotation=_rot_z(-0.9), translation=(0, 2, -1), scale=0.5)
    pts = np.random.default_rng(1).normal(size=(10, 3))
    np.testing.assert_allclose(a.compose(b).apply_points(pts),
                               a.apply_points(b.apply_points(pts)), atol=1e-12)


def test_feature_sidecar_round_trip():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(17, 24)).astype(np.float32)
    data = serialize_feature_sidecar(feats)
    np.testing.assert_array_equal(parse_feature_sidecar(data), feats)
    with pytest.raises(FormatError):
        parse_feature_sidecar(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        parse_feature_sidecar(data[:-4])
    with pytest.raises(ValidationError):
        serialize_feature_sidecar(np.full((2, 2), np.inf, dtype=np.float32))
    with pytest.raises(FormatError):
        parse_feature_sidecar(serialize_feature_sidecar(
            np.zeros((1, 1), np.float32))[:4] + np.asarray([1, 0], "<u4").tobytes())

"""Parse, validate, transform, and serialize Gaussian splat point files.

The on-disk format is the de-facto binary splat point file: a PLY with one
``vertex`` element whose properties are all little-endian 32-bit floats in
the order x,y,z, nx,ny,nz, f_dc_0..2, f_rest_0..44, opacity, scale_0..2,
rot_0..3.  Unrecognized extra properties are preserved verbatim so that
parse -> serialize round-trips are bit-exact.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import sh
from .errors import FormatError, UnsupportedTransformError, ValidationError

_POSITION_FIELDS = ("x", "y", "z")
_NORMAL_FIELDS = ("nx", "ny", "nz")
_DC_FIELDS = tuple(f"f_dc_{i}" for i in range(3))
_REST_FIELDS = tuple(f"f_rest_{i}" for i in range(45))
_OPACITY_FIELD = ("opacity",)
_SCALE_FIELDS = tuple(f"scale_{i}" for i in range(3))
_ROT_FIELDS = tuple(f"rot_{i}" for i in range(4))

REQUIRED_FIELDS = (_POSITION_FIELDS + _NORMAL_FIELDS + _DC_FIELDS + _REST_FIELDS
                   + _OPACITY_FIELD + _SCALE_FIELDS + _ROT_FIELDS)

SIDECAR_MAGIC = b"FSC1"
MAX_RAW_FEATURE_DIM = 768


@dataclass
class SplatCloud:
    """Array-of-Gaussians payload; the appearance substrate.

    positions (N,3) scene units; log_scales (N,3); rotations (N,4) unit
    quaternions (w,x,y,z); opacity_logits (N,); sh_coeffs (N,16,3) DC first;
    reduced_features optional (N,8); raw_features optional (N,D), D <= 768.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    reduced_features: np.ndarray | None = None
    raw_features: np.ndarray | None = None
    semantic_substituted: bool = False
    # Raw on-disk header/records + field names, kept for bit-exact round-trips.
    _records: np.ndarray | None = field(default=None, repr=False)
    _record_fields: tuple[str, ...] | None = field(default=None, repr=False)
    _header_bytes: bytes | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.positions)

    @staticmethod
    def empty() -> "SplatCloud":
        return SplatCloud(
            positions=np.zeros((0, 3), np.float32),
            log_scales=np.zeros((0, 3), np.float32),
            rotations=np.zeros((0, 4), np.float32),
            opacity_logits=np.zeros(0, np.float32),
            sh_coeffs=np.zeros((0, 16, 3), np.float32))

    @property
    def opacities(self) -> np.ndarray:
        """Post-activation opacity, strictly inside (0,1)."""
        return 1.0 / (1.0 + np.exp(-self.opacity_logits.astype(np.float64)))

    def without_records(self) -> "SplatCloud":
        return replace(self, _records=None, _record_fields=None, _header_bytes=None)

    def select(self, indices: np.ndarray) -> "SplatCloud":
        """Subset cloud (new arrays); raw records dropped."""
        idx = np.asarray(indices)
        return SplatCloud(
            positions=self.positions[idx].copy(),
            log_scales=self.log_scales[idx].copy(),
            rotations=self.rotations[idx].copy(),
            opacity_logits=self.opacity_logits[idx].copy(),
            sh_coeffs=self.sh_coeffs[idx].copy(),
            reduced_features=None if self.reduced_features is None else self.reduced_features[idx].copy(),
            raw_features=None if self.raw_features is None else self.raw_features[idx].copy(),
            semantic_substituted=self.semantic_substituted,
        )

    def allclose(self, other: "SplatCloud", atol: float = 0.0) -> bool:
        return (np.allclose(self.positions, other.positions, atol=atol)
                and np.allclose(self.log_scales, other.log_scales, atol=atol)
                and np.allclose(self.rotations, other.rotations, atol=atol)
                and np.allclose(self.opacity_logits, other.opacity_logits, atol=atol)
                and np.allclose(self.sh_coeffs, other.sh_coeffs, atol=atol))


def concat_clouds(clouds: list[SplatCloud]) -> SplatCloud:
    if not clouds:
        return SplatCloud(
            positions=np.zeros((0, 3), np.float32),
            log_scales=np.zeros((0, 3), np.float32),
            rotations=np.zeros((0, 4), np.float32),
            opacity_logits=np.zeros((0,), np.float32),
            sh_coeffs=np.zeros((0, 16, 3), np.float32),
        )
    return SplatCloud(
        positions=np.concatenate([c.positions for c in clouds]),
        log_scales=np.concatenate([c.log_scales for c in clouds]),
        rotations=np.concatenate([c.rotations for c in clouds]),
        opacity_logits=np.concatenate([c.opacity_logits for c in clouds]),
        sh_coeffs=np.concatenate([c.sh_coeffs for c in clouds]),
    )


def _parse_header(data: bytes) -> tuple[int, list[tuple[str, str]], int]:
    """Returns (vertex_count, [(name, type)], payload_offset)."""
    end_marker = b"end_header\n"
    end = data.find(end_marker)
    if end < 0:
        raise FormatError("missing end_header")
    header = data[:end].decode("ascii", errors="replace")
    lines = header.split("\n")
    if not lines or lines[0].strip() != "ply":
        raise FormatError("not a PLY file")
    fmt_ok = any(ln.strip() == "format binary_little_endian 1.0" for ln in lines)
    if not fmt_ok:
        raise FormatError("unsupported PLY format (need binary_little_endian 1.0)")
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for ln in lines[1:]:
        parts = ln.strip().split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element":
            if len(parts) != 3:
                raise FormatError(f"bad element line: {ln!r}")
            in_vertex = parts[1] == "vertex"
            if not in_vertex:
                raise FormatError(f"unsupported extra element: {parts[1]}")
            count = int(parts[2])
            continue
        if parts[0] == "property" and in_vertex:
            if len(parts) != 3:
                raise FormatError(f"bad property line: {ln!r}")
            props.append((parts[2], parts[1]))
    if count is None:
        raise FormatError("missing vertex element")
    if count < 0:
        raise FormatError("element count must be >= 0")
    return count, props, end + len(end_marker)


_PLY_DTYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


def parse_splat_file(data: bytes) -> SplatCloud:
    """Parse a binary splat point file into a SplatCloud.

    Quaternions are renormalized on load; any NaN/Inf in a record is a hard
    parse error; raw records are retained for bit-exact serialization.
    """
    count, props, offset = _parse_header(data)
    names = [p[0] for p in props]
    for req in REQUIRED_FIELDS:
        if req not in names:
            raise FormatError(f"missing required field: {req}")
    try:
        dtype = np.dtype([(n, _PLY_DTYPES[t]) for n, t in props])
    except KeyError as e:
        raise FormatError(f"unsupported property type: {e.args[0]}") from None
    expected = offset + count * dtype.itemsize
    if len(data) < expected:
        raise FormatError(
            f"truncated payload: need {expected - offset} bytes, have {len(data) - offset}")
    if len(data) > expected:
        raise FormatError("trailing bytes after vertex data")
    records = np.frombuffer(data[offset:expected], dtype=dtype)

    def col(name: str) -> np.ndarray:
        return records[name].astype(np.float32)

    positions = np.stack([col(n) for n in _POSITION_FIELDS], axis=1)
    log_scales = np.stack([col(n) for n in _SCALE_FIELDS], axis=1)
    rotations = np.stack([col(n) for n in _ROT_FIELDS], axis=1).astype(np.float64)
    opacity_logits = col("opacity")
    dc = np.stack([col(n) for n in _DC_FIELDS], axis=1)  # (N,3)
    rest = np.stack([col(n) for n in _REST_FIELDS], axis=1)  # (N,45) channel-major
    sh_coeffs = np.empty((count, 16, 3), dtype=np.float32)
    sh_coeffs[:, 0, :] = dc
    for c in range(3):
        sh_coeffs[:, 1:, c] = rest[:, c * 15:(c + 1) * 15]

    for name, arr in (("positions", positions), ("scales", log_scales),
                      ("rotations", rotations), ("opacity", opacity_logits),
                      ("sh", sh_coeffs)):
        if not np.isfinite(arr).all():
            raise FormatError(f"non-finite value in field group: {name}")

    norms = np.linalg.norm(rotations, axis=1)
    if np.any(norms < 1e-8):
        raise FormatError("zero-norm quaternion")
    rotations = (rotations / norms[:, None]).astype(np.float32)

    return SplatCloud(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=opacity_logits,
        sh_coeffs=sh_coeffs,
        _records=records,
        _record_fields=tuple(names),
        _header_bytes=data[:offset],
    )


def _validate_for_write(cloud: SplatCloud) -> None:
    for name, arr in (("positions", cloud.positions), ("log_scales", cloud.log_scales),
                      ("rotations", cloud.rotations), ("opacity_logits", cloud.opacity_logits),
                      ("sh_coeffs", cloud.sh_coeffs)):
        if not np.isfinite(arr).all():
            raise ValidationError(f"non-finite value in {name}; refusing to serialize")


def serialize_splat_file(cloud: SplatCloud) -> bytes:
    """Serialize a SplatCloud to the binary splat point format.

    When the cloud still carries its parsed raw records they are written back
    verbatim (bit-exact round-trip); otherwise records are rebuilt from the
    canonical arrays.
    """
    _validate_for_write(cloud)
    if cloud._records is not None and cloud._header_bytes is not None:
        return cloud._header_bytes + cloud._records.tobytes()
    if cloud._records is not None and cloud._record_fields is not None:
        names = list(cloud._record_fields)
        records = cloud._records
    else:
        names = list(REQUIRED_FIELDS)
        dtype = np.dtype([(n, "<f4") for n in names])
        records = np.zeros(len(cloud), dtype=dtype)
        pos = cloud.positions.astype(np.float32)
        for i, n in enumerate(_POSITION_FIELDS):
            records[n] = pos[:, i]
        for i, n in enumerate(_SCALE_FIELDS):
            records[n] = cloud.log_scales[:, i].astype(np.float32)
        for i, n in enumerate(_ROT_FIELDS):
            records[n] = cloud.rotations[:, i].astype(np.float32)
        records["opacity"] = cloud.opacity_logits.astype(np.float32)
        shc = cloud.sh_coeffs.astype(np.float32)
        for i, n in enumerate(_DC_FIELDS):
            records[n] = shc[:, 0, i]
        for c in range(3):
            for j in range(15):
                records[_REST_FIELDS[c * 15 + j]] = shc[:, 1 + j, c]

    type_names = {np.dtype("<f4"): "float", np.dtype("<f8"): "double",
                  np.dtype("u1"): "uchar", np.dtype("i1"): "char",
                  np.dtype("<i2"): "short", np.dtype("<u2"): "ushort",
                  np.dtype("<i4"): "int", np.dtype("<u4"): "uint"}
    buf = io.BytesIO()
    buf.write(b"ply\nformat binary_little_endian 1.0\n")
    buf.write(f"element vertex {len(records)}\n".encode("ascii"))
    for n in names:
        tname = type_names[records.dtype.fields[n][0]]
        buf.write(f"property {tname} {n}\n".encode("ascii"))
    buf.write(b"end_header\n")
    buf.write(records.tobytes())
    return buf.getvalue()


def clip_scales(cloud: SplatCloud, voxel_size: float) -> SplatCloud:
    """Clip Gaussian extents so no axis exceeds twice the voxel size."""
    if voxel_size <= 0:
        raise ValidationError("voxel_size must be > 0")
    cap = np.log(2.0 * voxel_size)
    clipped = np.minimum(cloud.log_scales, np.float32(cap))
    if np.array_equal(clipped, cloud.log_scales):
        return cloud
    return replace(cloud.without_records(), log_scales=clipped)


@dataclass(frozen=True)
class Transform:
    """Rigid + uniform-scale transform: x -> scale * R x + translation."""

    rotation: np.ndarray  # 3x3
    translation: np.ndarray  # (3,)
    scale: float = 1.0

    @staticmethod
    def identity() -> "Transform":
        return Transform(np.eye(3), np.zeros(3), 1.0)

    @staticmethod
    def from_parts(rotation: np.ndarray | None = None,
                   translation=(0.0, 0.0, 0.0), scale: float = 1.0) -> "Transform":
        rot = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        return Transform(rot, np.asarray(translation, dtype=np.float64), float(scale))

    def compose(self, inner: "Transform") -> "Transform":
        """self after inner: (self o inner)(x) = self(inner(x))."""
        return Transform(self.rotation @ inner.rotation,
                         self.scale * self.rotation @ inner.translation + self.translation,
                         self.scale * inner.scale)

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(pts, dtype=np.float64) @ self.rotation.T) + self.translation


def _check_rotation(rot: np.ndarray) -> None:
    if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or np.linalg.det(rot) < 0:
        raise UnsupportedTransformError("rotation part is not a proper rotation")


def transform_cloud(cloud: SplatCloud, transform: Transform) -> SplatCloud:
    """Apply a rigid + uniform-scale transform to every Gaussian.

    Positions map affinely, quaternions are left-composed with the rotation,
    log-scales shift by log(scale), and SH coefficients are rotated (band 1
    exactly, bands 2-3 by sphere-sampled refit).
    """
    if transform.scale <= 0:
        raise UnsupportedTransformError("scale must be positive and uniform")
    _check_rotation(transform.rotation)

    is_identity = (transform.scale == 1.0
                   and np.array_equal(transform.rotation, np.eye(3))
                   and not transform.translation.any())
    if is_identity:
        return cloud

    positions = transform.apply_points(cloud.positions).astype(np.float32)
    log_scales = (cloud.log_scales.astype(np.float64) + np.log(transform.scale)).astype(np.float32)
    q_rot = sh.matrix_to_quat(transform.rotation)
    rotations = sh.quat_multiply(q_rot, cloud.rotations.astype(np.float64))
    rotations = (rotations / np.linalg.norm(rotations, axis=1, keepdims=True)).astype(np.float32)
    m16 = sh.sh_rotation_matrix(transform.rotation)
    sh_coeffs = np.einsum("ij,njc->nic", m16, cloud.sh_coeffs.astype(np.float64)).astype(np.float32)
    return replace(cloud.without_records(), positions=positions, log_scales=log_scales,
                   rotations=rotations, sh_coeffs=sh_coeffs)


def parse_feature_sidecar(data: bytes) -> np.ndarray:
    """Parse the raw per-point feature sidecar: magic, N, D, N*D float32 rows."""
    if len(data) < 12 or data[:4] != SIDECAR_MAGIC:
        raise FormatError("bad feature sidecar magic")
    n = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    d = int(np.frombuffer(data[8:12], dtype="<u4")[0])
    if d < 1 or d > MAX_RAW_FEATURE_DIM:
        raise FormatError(f"feature dimension {d} outside [1, {MAX_RAW_FEATURE_DIM}]")
    expected = 12 + 4 * n * d
    if len(data) < expected:
        raise FormatError("truncated feature sidecar")
    feats = np.frombuffer(data[12:expected], dtype="<f4").reshape(n, d)
    if not np.isfinite(feats).all():
        raise FormatError("non-finite value in feature sidecar")
    return feats.copy()


def serialize_feature_sidecar(features: np.ndarray) -> bytes:
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 2:
        raise ValidationError("features must be a 2-D array")
    if not np.isfinite(feats).all():
        raise ValidationError("non-finite value in features; refusing to serialize")
    n, d = feats.shape
    header = SIDECAR_MAGIC + np.asarray([n, d], dtype="<u4").tobytes()
    return header + feats.tobytes()

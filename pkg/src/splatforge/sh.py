"""Real spherical harmonics (degree 3) evaluation and rotation.

Coefficient layout follows the splat point format: 16 coefficients per color
channel, DC first, then bands 1..3 in the usual real-SH order.  Rotation is
exact for bands 0 and 1; bands 2 and 3 are rotated by evaluating the function
on a fixed sphere sampling and least-squares refitting, which for functions
inside the degree-3 span is exact up to solver precision.
"""

from __future__ import annotations

import numpy as np

# Normalization constants of the real spherical harmonics basis used by
# splat renderers (Condon-Shortley phase folded into the signs below).
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

N_COEFFS = 16


def eval_sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 16 degree-3 basis functions at unit directions (S,3) -> (S,16)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = np.empty(d.shape[:-1] + (N_COEFFS,), dtype=np.float64)
    out[..., 0] = _C0
    out[..., 1] = -_C1 * y
    out[..., 2] = _C1 * z
    out[..., 3] = -_C1 * x
    out[..., 4] = _C2[0] * xy
    out[..., 5] = _C2[1] * yz
    out[..., 6] = _C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = _C2[3] * xz
    out[..., 8] = _C2[4] * (xx - yy)
    out[..., 9] = _C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = _C3[1] * xy * z
    out[..., 11] = _C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = _C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = _C3[5] * z * (xx - yy)
    out[..., 15] = _C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_sh(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Evaluate SH functions with coeffs (...,16,C) at dirs (S,3) -> (S,...,C)."""
    basis = eval_sh_basis(dirs)  # (S,16)
    return np.einsum("si,...ic->s...c", basis, np.asarray(coeffs, dtype=np.float64))


def fibonacci_sphere(n: int = 642) -> np.ndarray:
    """Deterministic, near-uniform unit directions on the sphere, (n,3)."""
    i = np.arange(n, dtype=np.float64)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


_FIT_DIRS = fibonacci_sphere(642)
_FIT_BASIS = eval_sh_basis(_FIT_DIRS)                      # (S,16)
_FIT_PINV = np.linalg.pinv(_FIT_BASIS)                     # (16,S)


def _band1_matrix(rot: np.ndarray) -> np.ndarray:
    """Exact 3x3 matrix acting on band-1 coefficients (indices 1..3).

    The band-1 part of the function is k * <u, dir> with u = (-c3, -c1, c2);
    rotating the function maps u -> R u.
    """
    # coefficient -> direction-vector components: u = (-c3, -c1, c2)
    p = np.array([[0.0, 0.0, -1.0],
                  [-1.0, 0.0, 0.0],
                  [0.0, 1.0, 0.0]])  # u = p @ c
    return np.linalg.solve(p, rot @ p)


def sh_rotation_matrix(rot: np.ndarray) -> np.ndarray:
    """16x16 block-diagonal matrix M with rotated_coeffs = M @ coeffs.

    rot is a 3x3 rotation acting on directions.  Band 0 is identity, band 1
    analytic, bands 2-3 fitted on the fixed sphere sampling; cross-band
    entries are zeroed (rotations never mix bands).
    """
    rot = np.asarray(rot, dtype=np.float64)
    rotated_basis = eval_sh_basis(_FIT_DIRS @ rot)  # basis at R^-1 d (row-vector convention)
    m = _FIT_PINV @ rotated_basis
    out = np.zeros((N_COEFFS, N_COEFFS), dtype=np.float64)
    out[0, 0] = 1.0
    out[1:4, 1:4] = _band1_matrix(rot)
    out[4:9, 4:9] = m[4:9, 4:9]
    out[9:16, 9:16] = m[9:16, 9:16]
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (...,4) in (w,x,y,z) order -> rotation matrix (...,3,3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(rot: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix -> unit quaternion (w,x,y,z), w >= 0."""
    m = np.asarray(rot, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1e-12, 1.0 + m[i, i] - m[j, j] - m[k, k])) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b of (w,x,y,z) quaternions; broadcasts over leading dims."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)

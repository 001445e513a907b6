"""Feature dimensionality reduction and suggestive selection.

Per-Gaussian descriptors are built from two halves: an appearance half (PCA
of the flattened 48-dim SH coefficient vector) and a semantic half (PCA of
the optional raw feature sidecar).  Each half is independently reduced to 4
dimensions and re-normalized to unit L2 per point.  K-means over the reduced
features powers cluster-based selection.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, ParameterError, StateError
from .splat_io import SplatCloud

FEATURE_DIM = 8


@dataclass(frozen=True)
class FeatureConfig:
    appearance_dims: int = 4
    semantic_dims: int = 4

    @property
    def total_dims(self) -> int:
        return self.appearance_dims + self.semantic_dims

    def __post_init__(self):
        if self.appearance_dims + self.semantic_dims != FEATURE_DIM:
            raise ParameterError("appearance_dims + semantic_dims must equal 8")


@dataclass(frozen=True)
class PcaBasis:
    """Top-k principal axes of a sample matrix."""

    mean: np.ndarray                 # (D,)
    components: np.ndarray           # (k,D) orthonormal rows
    explained_variance: np.ndarray   # (k,) non-increasing

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def project(self, samples: np.ndarray) -> np.ndarray:
        return (np.asarray(samples, dtype=np.float64) - self.mean) @ self.components.T

    def reconstruct(self, projected: np.ndarray) -> np.ndarray:
        return np.asarray(projected, dtype=np.float64) @ self.components + self.mean


def fit_pca(samples: np.ndarray, k: int) -> PcaBasis:
    """Fit a k-component PCA basis via SVD of the centered sample matrix.

    Component signs are fixed deterministically (largest-magnitude entry of
    each component is positive).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("samples must be a 2-D matrix")
    m, d = x.shape
    if k < 1:
        raise ParameterError("k must be >= 1")
    if k > min(m, d):
        raise DimensionError(f"k={k} exceeds min(M={m}, D={d})")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k]
    signs = np.sign(components[np.arange(k), np.argmax(np.abs(components), axis=1)])
    signs[signs == 0] = 1.0
    components = components * signs[:, None]
    explained = (s[:k] ** 2) / max(m - 1, 1)
    return PcaBasis(mean=mean, components=components, explained_variance=explained)


def _normalize_half(half: np.ndarray) -> np.ndarray:
    """Unit-L2 per row; exactly-zero rows stay zero."""
    norms = np.linalg.norm(half, axis=1)
    out = np.zeros_like(half)
    nz = norms > 0
    out[nz] = half[nz] / norms[nz, None]
    return out


def project_and_normalize(appearance_in: np.ndarray, semantic_in: np.ndarray,
                          basis_app: PcaBasis, basis_sem: PcaBasis,
                          cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Project both halves through their bases and unit-normalize each half."""
    app = basis_app.project(appearance_in)[:, :cfg.appearance_dims]
    sem = basis_sem.project(semantic_in)[:, :cfg.semantic_dims]
    out = np.concatenate([_normalize_half(app), _normalize_half(sem)], axis=1)
    return out.astype(np.float32)


def reduce_cloud_features(cloud: SplatCloud, cfg: FeatureConfig = FeatureConfig()
                          ) -> tuple[SplatCloud, PcaBasis, PcaBasis]:
    """Compute reduced 8-dim features for a cloud and return the fitted bases.

    Appearance input is the flattened SH coefficient block.  When the raw
    feature sidecar is absent, the appearance PCA is fitted with 8 components
    and its components 4..7 stand in for the semantic half; the substitution
    is recorded on the cloud.
    """
    n = len(cloud)
    sh_flat = cloud.sh_coeffs.reshape(n, -1).astype(np.float64)
    if cloud.raw_features is not None:
        basis_app = fit_pca(sh_flat, cfg.appearance_dims)
        basis_sem = fit_pca(cloud.raw_features, cfg.semantic_dims)
        reduced = project_and_normalize(sh_flat, cloud.raw_features, basis_app, basis_sem, cfg)
        substituted = False
    else:
        joint = fit_pca(sh_flat, cfg.appearance_dims + cfg.semantic_dims)
        basis_app = PcaBasis(joint.mean, joint.components[:cfg.appearance_dims],
                             joint.explained_variance[:cfg.appearance_dims])
        basis_sem = PcaBasis(joint.mean, joint.components[cfg.appearance_dims:],
                             joint.explained_variance[cfg.appearance_dims:])
        reduced = project_and_normalize(sh_flat, sh_flat, basis_app, basis_sem, cfg)
        substituted = True
    out = replace(cloud, reduced_features=reduced, semantic_substituted=substituted)
    return out, basis_app, basis_sem


def kmeans_quantize(features: np.ndarray, k: int, seed: int,
                    max_iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd k-means with greedy farthest-point seeding.

    Deterministic given the seed; ties in nearest-centroid assignment go to
    the lowest centroid index; an empty cluster keeps its previous centroid.
    Returns (assignments (N,), centroids (k,d)).
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise ParameterError("k must be >= 1")
    if k > n:
        raise ParameterError(f"k={k} exceeds point count {n}")

    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    chosen = [first]
    min_d2 = np.sum((x - x[first]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(min_d2))  # argmax takes the lowest index on ties
        chosen.append(nxt)
        min_d2 = np.minimum(min_d2, np.sum((x - x[nxt]) ** 2, axis=1))
    centroids = x[chosen].copy()

    assignments = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        d2 = (np.sum(x * x, axis=1)[:, None] - 2.0 * x @ centroids.T
              + np.sum(centroids * centroids, axis=1)[None, :])
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for c in range(k):
            members = assignments == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
    return assignments, centroids


def kmeans_inertia(features: np.ndarray, assignments: np.ndarray,
                   centroids: np.ndarray) -> float:
    x = np.asarray(features, dtype=np.float64)
    return float(np.sum((x - centroids[assignments]) ** 2))


def select_by_clusters(assignments: np.ndarray, chosen: set[int] | list[int]) -> np.ndarray:
    """Boolean mask selecting points whose cluster label is in `chosen`."""
    labels = np.asarray(assignments)
    valid = set(np.unique(labels).tolist())
    chosen_set = set(int(c) for c in chosen)
    unknown = chosen_set - valid
    if unknown:
        raise ParameterError(f"unknown cluster labels: {sorted(unknown)}")
    if not chosen_set:
        return np.zeros(len(labels), dtype=bool)
    return np.isin(labels, sorted(chosen_set))


def require_reduced(cloud: SplatCloud) -> np.ndarray:
    if cloud.reduced_features is None:
        raise StateError("cloud has no reduced features; run reduce_cloud_features first")
    return cloud.reduced_features

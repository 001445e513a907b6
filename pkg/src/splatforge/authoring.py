"""Primitive lifecycle, conditioning assembly, layers, and scene export.

A trained primitive is persisted as a single-file archive holding the model
weights, the exemplar grids (target with Gaussian payload + coarse), the PCA
bases, the exemplar cloud subset, and JSON metadata.  Layers are generated
clouds with a rigid+scale transform and a per-channel color gain on the SH
DC coefficients; scenes compose layers plus optional static regions.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .consistency import (ConsistencyConfig, remap_voxelwise_nn, run_consistency,
                          transplant_gaussians)
from .errors import FormatError, ParameterError, StateError, ValidationError
from .features import FeatureConfig, PcaBasis, reduce_cloud_features
from .gca import SamplerConfig, run_sampler, state_to_grid
from .net import deserialize_model, serialize_model
from .net.unet import NetworkConfig, TransitionKernelModel
from .splat_io import (SplatCloud, Transform, concat_clouds, parse_splat_file,
                       serialize_splat_file, transform_cloud)
from .training import ExemplarVoxels, InfusionSchedule, TrainRecord, train_primitive
from .voxelize import (VoxelGrid, assign_representative_features,
                       build_surface_voxels, default_bounds, downsample_to,
                       make_grid, voxelize_mesh)

ARCHIVE_MAGIC = b"SFAR"
ARCHIVE_VERSION = 1


# ---------------------------------------------------------------------------
# section container


def _pack_sections(sections: list[tuple[str, bytes]]) -> bytes:
    out = io.BytesIO()
    out.write(ARCHIVE_MAGIC)
    out.write(struct.pack("<II", ARCHIVE_VERSION, len(sections)))
    for name, payload in sections:
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    return out.getvalue()


def _unpack_sections(data: bytes) -> dict[str, bytes]:
    if data[:4] != ARCHIVE_MAGIC:
        raise FormatError("not an archive (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported archive version {version}")
    pos = 12
    sections: dict[str, bytes] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (plen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        sections[name] = data[pos:pos + plen]
        pos += plen
    if pos != len(data):
        raise FormatError("trailing bytes after archive sections")
    return sections


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
        payload = buf.getvalue()
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    return out.getvalue()


def _unpack_arrays(data: bytes) -> dict[str, np.ndarray]:
    (count,) = struct.unpack_from("<I", data, 0)
    pos = 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (plen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        arrays[name] = np.load(io.BytesIO(data[pos:pos + plen]), allow_pickle=False)
        pos += plen
    return arrays


def _grid_arrays(grid: VoxelGrid) -> dict[str, np.ndarray]:
    out = {"resolution": np.int64(grid.resolution), "bounds": grid.bounds,
           "coords": grid.coords, "dropped": np.int64(grid.dropped)}
    if grid.features is not None:
        out["features"] = grid.features
    if grid.payload_offsets is not None:
        out["payload_offsets"] = grid.payload_offsets
        out["payload_indices"] = grid.payload_indices
    if grid.representative is not None:
        out["representative"] = grid.representative
    return out


def _grid_from_arrays(arrays: dict[str, np.ndarray]) -> VoxelGrid:
    return VoxelGrid(resolution=int(np.ravel(arrays["resolution"])[0]),
                     bounds=arrays["bounds"].reshape(2, 3),
                     coords=arrays["coords"],
                     features=arrays.get("features"),
                     payload_offsets=arrays.get("payload_offsets"),
                     payload_indices=arrays.get("payload_indices"),
                     representative=arrays.get("representative"),
                     dropped=int(np.ravel(arrays.get("dropped", 0))[0]))


def _basis_arrays(prefix: str, basis: PcaBasis) -> dict[str, np.ndarray]:
    return {f"{prefix}_mean": basis.mean, f"{prefix}_components": basis.components,
            f"{prefix}_explained": basis.explained_variance}


def _basis_from_arrays(prefix: str, arrays: dict[str, np.ndarray]) -> PcaBasis:
    return PcaBasis(mean=arrays[f"{prefix}_mean"],
                    components=arrays[f"{prefix}_components"],
                    explained_variance=arrays[f"{prefix}_explained"])


def atomic_write(path: str, data: bytes) -> None:
    """Write via a temp file in the same directory and atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = os.path.join(directory, f".{os.path.basename(path)}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# primitive archive


@dataclass
class PrimitiveArchive:
    """Everything needed to regenerate from a trained primitive."""

    name: str
    seed: int
    model_bytes: bytes
    target_grid: VoxelGrid
    coarse_grid: VoxelGrid
    basis_app: PcaBasis
    basis_sem: PcaBasis
    cloud: SplatCloud
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        check = downsample_to(self.target_grid, self.coarse_grid.resolution)
        if not np.array_equal(check.coords, self.coarse_grid.coords):
            raise ValidationError("archive coarse grid does not match its target grid")
        # keep the cloud in parse-canonical form (parse renormalizes
        # quaternions) so generation from a live archive matches a
        # save/load round trip bit for bit
        self.cloud = parse_splat_file(serialize_splat_file(self.cloud))
        self.load_model()  # validates the model blob eagerly

    @property
    def target_resolution(self) -> int:
        return self.target_grid.resolution

    @property
    def coarse_resolution(self) -> int:
        return self.coarse_grid.resolution

    def load_model(self) -> TransitionKernelModel:
        return deserialize_model(self.model_bytes)

    def exemplar(self) -> ExemplarVoxels:
        return ExemplarVoxels(self.target_grid, self.coarse_grid)

    def to_bytes(self) -> bytes:
        meta = dict(self.meta)
        meta.update({"name": self.name, "seed": int(self.seed),
                     "target_resolution": int(self.target_resolution),
                     "coarse_resolution": int(self.coarse_resolution)})
        sections = [
            ("meta", json.dumps(meta, sort_keys=True).encode("utf-8")),
            ("model", self.model_bytes),
            ("target", _pack_arrays(_grid_arrays(self.target_grid))),
            ("coarse", _pack_arrays(_grid_arrays(self.coarse_grid))),
            ("bases", _pack_arrays({**_basis_arrays("app", self.basis_app),
                                    **_basis_arrays("sem", self.basis_sem)})),
            ("cloud", serialize_splat_file(self.cloud)),
        ]
        return _pack_sections(sections)

    def save(self, path: str) -> None:
        atomic_write(path, self.to_bytes())

    @staticmethod
    def from_bytes(data: bytes) -> "PrimitiveArchive":
        sections = _unpack_sections(data)
        for required in ("meta", "model", "target", "coarse", "bases", "cloud"):
            if required not in sections:
                raise FormatError(f"archive is missing section '{required}'")
        meta = json.loads(sections["meta"].decode("utf-8"))
        bases = _unpack_arrays(sections["bases"])
        return PrimitiveArchive(
            name=meta.get("name", ""), seed=int(meta.get("seed", 0)),
            model_bytes=sections["model"],
            target_grid=_grid_from_arrays(_unpack_arrays(sections["target"])),
            coarse_grid=_grid_from_arrays(_unpack_arrays(sections["coarse"])),
            basis_app=_basis_from_arrays("app", bases),
            basis_sem=_basis_from_arrays("sem", bases),
            cloud=parse_splat_file(sections["cloud"]),
            meta=meta)

    @staticmethod
    def load(path: str) -> "PrimitiveArchive":
        with open(path, "rb") as fh:
            return PrimitiveArchive.from_bytes(fh.read())


def build_exemplar(cloud: SplatCloud, target_resolution: int = 64,
                   coarse_resolution: int = 16, bounds=None,
                   mask: np.ndarray | None = None,
                   feature_cfg: FeatureConfig = FeatureConfig(),
                   allow_any_resolution: bool = False
                   ) -> tuple[ExemplarVoxels, PcaBasis, PcaBasis, SplatCloud]:
    """Full ingest path: select, PCA-reduce, voxelize, attach features.

    Returns (exemplar grids, appearance basis, semantic basis, the reduced
    cloud actually voxelized).
    """
    if mask is not None:
        idx = np.nonzero(np.asarray(mask, dtype=bool))[0]
        if len(idx) == 0:
            raise ParameterError("selection mask is empty")
        cloud = cloud.select(idx)
    cloud, basis_app, basis_sem = reduce_cloud_features(cloud, feature_cfg)
    if bounds is None:
        bounds = default_bounds(cloud.positions)
    target = build_surface_voxels(cloud, bounds, target_resolution,
                                  allow_any_resolution=allow_any_resolution)
    if len(target) == 0:
        raise ValidationError("no surface voxels (all opacities below threshold?)")
    target = assign_representative_features(target, cloud)
    exemplar = ExemplarVoxels.from_target(target, coarse_resolution)
    return exemplar, basis_app, basis_sem, cloud


def train_archive(cloud: SplatCloud, name: str, seed: int = 0,
                  target_resolution: int = 64, coarse_resolution: int = 16,
                  net_cfg: NetworkConfig = NetworkConfig(),
                  schedule: InfusionSchedule = InfusionSchedule(),
                  mask: np.ndarray | None = None, progress=None,
                  lr: float = 5e-4, weight_decay: float = 1e-6,
                  allow_any_resolution: bool = False
                  ) -> tuple[PrimitiveArchive, list[TrainRecord]]:
    """Train a primitive from a cloud and wrap it in an archive."""
    exemplar, basis_app, basis_sem, reduced = build_exemplar(
        cloud, target_resolution, coarse_resolution, mask=mask,
        allow_any_resolution=allow_any_resolution)
    model, log = train_primitive(exemplar, net_cfg, schedule, seed,
                                 progress=progress, lr=lr,
                                 weight_decay=weight_decay)
    archive = PrimitiveArchive(
        name=name, seed=seed, model_bytes=serialize_model(model),
        target_grid=exemplar.target, coarse_grid=exemplar.coarse,
        basis_app=basis_app, basis_sem=basis_sem,
        cloud=reduced.without_records(),
        meta={"iterations": schedule.iterations,
              "semantic_substituted": bool(reduced.semantic_substituted)})
    return archive, log


# ---------------------------------------------------------------------------
# ingest projects


@dataclass
class Project:
    """Ingest product: a cloud with reduced features plus the fitted bases."""

    cloud: SplatCloud
    basis_app: PcaBasis
    basis_sem: PcaBasis
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        meta = dict(self.meta)
        meta.update({"kind": "project",
                     "semantic_substituted": bool(self.cloud.semantic_substituted)})
        arrays: dict[str, np.ndarray] = {**_basis_arrays("app", self.basis_app),
                                         **_basis_arrays("sem", self.basis_sem)}
        if self.cloud.reduced_features is not None:
            arrays["reduced"] = self.cloud.reduced_features
        if self.cloud.raw_features is not None:
            arrays["raw"] = self.cloud.raw_features
        return _pack_sections([
            ("meta", json.dumps(meta, sort_keys=True).encode("utf-8")),
            ("cloud", serialize_splat_file(self.cloud)),
            ("arrays", _pack_arrays(arrays)),
        ])

    def save(self, path: str) -> None:
        atomic_write(path, self.to_bytes())

    @staticmethod
    def from_bytes(data: bytes) -> "Project":
        sections = _unpack_sections(data)
        for required in ("meta", "cloud", "arrays"):
            if required not in sections:
                raise FormatError(f"project is missing section '{required}'")
        meta = json.loads(sections["meta"].decode("utf-8"))
        if meta.get("kind") != "project":
            raise FormatError("archive is not an ingest project")
        arrays = _unpack_arrays(sections["arrays"])
        cloud = parse_splat_file(sections["cloud"])
        cloud = replace(cloud, reduced_features=arrays.get("reduced"),
                        raw_features=arrays.get("raw"),
                        semantic_substituted=bool(meta.get("semantic_substituted",
                                                           False)))
        return Project(cloud=cloud,
                       basis_app=_basis_from_arrays("app", arrays),
                       basis_sem=_basis_from_arrays("sem", arrays), meta=meta)

    @staticmethod
    def load(path: str) -> "Project":
        with open(path, "rb") as fh:
            return Project.from_bytes(fh.read())


def ingest_cloud(cloud: SplatCloud, raw_features: np.ndarray | None = None,
                 feature_cfg: FeatureConfig = FeatureConfig()) -> Project:
    """Attach optional raw semantic features and fit the PCA reduction."""
    if raw_features is not None:
        if len(raw_features) != len(cloud):
            raise ValidationError("feature sidecar row count mismatch")
        cloud = replace(cloud, raw_features=np.asarray(raw_features, np.float32))
    reduced, basis_app, basis_sem = reduce_cloud_features(cloud, feature_cfg)
    return Project(cloud=reduced, basis_app=basis_app, basis_sem=basis_sem,
                   meta={"point_count": len(cloud)})


# ---------------------------------------------------------------------------
# brushes and conditioning assembly


@dataclass
class Brush:
    """Coarse occupancy stamp normalized to its own bounding box."""

    name: str
    extents: np.ndarray           # (3,) int64
    cells: np.ndarray             # (n,3) int32, min corner at origin

    def to_json_dict(self) -> dict:
        return {"name": self.name, "extents": [int(v) for v in self.extents],
                "cells": [[int(v) for v in c] for c in self.cells]}

    @staticmethod
    def from_json_dict(obj: dict) -> "Brush":
        try:
            cells = np.asarray(obj["cells"], dtype=np.int64).reshape(-1, 3)
            extents = np.asarray(obj["extents"], dtype=np.int64)
            name = str(obj.get("name", ""))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad brush JSON: {e}") from None
        if len(cells) == 0:
            raise FormatError("brush has no cells")
        if cells.min() < 0 or np.any(cells.max(axis=0) >= extents):
            raise FormatError("brush cells outside extents")
        return Brush(name, extents, cells.astype(np.int32))


def extract_brush(selection: VoxelGrid, name: str) -> Brush:
    """Re-origin a coarse selection to its bounding box as a reusable stamp."""
    if len(selection) == 0:
        raise ParameterError("empty selection for brush extraction")
    lo = selection.coords.min(axis=0)
    cells = (selection.coords - lo).astype(np.int32)
    extents = cells.max(axis=0).astype(np.int64) + 1
    return Brush(name, extents, cells)


def assemble_conditioning(edits: list[dict], resolution: int, bounds
                          ) -> tuple[VoxelGrid, list[dict]]:
    """Fold an ordered edit list into a coarse conditioning grid.

    Edit ops: add / remove (single cell), stamp (brush cells + offset), mesh
    (vertices + faces voxelized in-bounds).  Later edits win; any edit that
    would place cells out of bounds is rejected and reported.
    """
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    occupied: set[tuple[int, int, int]] = set()
    report: list[dict] = []

    def in_bounds(cells: np.ndarray) -> bool:
        return len(cells) == 0 or bool(
            np.all((cells >= 0) & (cells < resolution)))

    for i, edit in enumerate(edits):
        op = edit.get("op")
        try:
            if op in ("add", "remove"):
                cell = np.asarray(edit["cell"], dtype=np.int64).reshape(3)
                if not in_bounds(cell[None]):
                    report.append({"index": i, "op": op,
                                   "reason": "cell out of bounds"})
                    continue
                key = tuple(int(v) for v in cell)
                if op == "add":
                    occupied.add(key)
                else:
                    occupied.discard(key)
            elif op == "stamp":
                brush = Brush.from_json_dict(edit["brush"])
                offset = np.asarray(edit.get("offset", [0, 0, 0]),
                                    dtype=np.int64).reshape(3)
                cells = brush.cells.astype(np.int64) + offset
                if not in_bounds(cells):
                    report.append({"index": i, "op": op,
                                   "reason": "stamp extends out of bounds"})
                    continue
                occupied.update(tuple(int(v) for v in c) for c in cells)
            elif op == "mesh":
                verts = np.asarray(edit["vertices"], dtype=np.float64)
                faces = np.asarray(edit["faces"], dtype=np.int64)
                tris = verts[faces]
                grid, _ = voxelize_mesh(tris, bounds, resolution)
                occupied.update(tuple(int(v) for v in c) for c in grid.coords)
            else:
                report.append({"index": i, "op": str(op),
                               "reason": "unknown edit op"})
        except (KeyError, TypeError, ValueError, IndexError, FormatError) as e:
            report.append({"index": i, "op": str(op), "reason": str(e)})
    coords = (np.asarray(sorted(occupied), dtype=np.int64).reshape(-1, 3)
              if occupied else np.zeros((0, 3), np.int64))
    return make_grid(resolution, bounds, coords), report


# ---------------------------------------------------------------------------
# layers and scenes


def transform_to_json(t: Transform) -> dict:
    from .sh import matrix_to_quat
    return {"translation": [float(v) for v in t.translation],
            "quaternion": [float(v) for v in matrix_to_quat(t.rotation)],
            "scale": float(t.scale)}


def transform_from_json(obj: dict) -> Transform:
    from .sh import quat_to_matrix
    quat = np.asarray(obj.get("quaternion", [1.0, 0.0, 0.0, 0.0]), dtype=np.float64)
    norm = np.linalg.norm(quat)
    if norm == 0 or not np.isfinite(norm):
        raise FormatError("bad transform quaternion")
    rot = quat_to_matrix(quat / norm)
    return Transform.from_parts(
        rotation=rot,
        translation=np.asarray(obj.get("translation", [0.0, 0.0, 0.0]), np.float64),
        scale=float(obj.get("scale", 1.0)))


@dataclass
class Layer:
    id: str
    primitive_id: str
    cloud: SplatCloud
    conditioning: VoxelGrid
    transform: Transform = field(default_factory=Transform.identity)
    color_gain: np.ndarray = field(default_factory=lambda: np.ones(3))
    grid: VoxelGrid | None = None
    skipped_voxels: int = 0

    def __post_init__(self):
        self.color_gain = np.asarray(self.color_gain, dtype=np.float64).reshape(3)
        if self.transform.scale <= 0:
            raise ParameterError("layer transform scale must be > 0")

    def describe(self) -> dict:
        return {"id": self.id, "primitive_id": self.primitive_id,
                "point_count": len(self.cloud),
                "transform": transform_to_json(self.transform),
                "color_gain": [float(v) for v in self.color_gain]}


@dataclass
class Scene:
    name: str = ""
    layers: list[Layer] = field(default_factory=list)
    static_regions: list[SplatCloud] = field(default_factory=list)

    def __post_init__(self):
        ids = [layer.id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise ValidationError("layer ids must be unique")

    def layer_by_id(self, layer_id: str) -> Layer:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise ParameterError(f"no layer with id {layer_id!r}")


def generate_layer(archive: PrimitiveArchive, conditioning: VoxelGrid,
                   seed: int, layer_id: str = "layer-0",
                   sampler_cfg: SamplerConfig | None = None,
                   consistency_cfg: ConsistencyConfig | None = None,
                   apply_consistency: bool = True, on_state=None,
                   model: TransitionKernelModel | None = None) -> Layer:
    """Full generation pipeline: sample, refine, remap, transplant.

    Deterministic for a fixed seed.  `on_state(t, state)` receives every
    intermediate sampler state in step order.
    """
    if len(conditioning) == 0:
        raise ParameterError("empty conditioning")
    if conditioning.resolution != archive.coarse_resolution:
        raise ParameterError(
            f"conditioning resolution {conditioning.resolution} does not match "
            f"primitive coarse resolution {archive.coarse_resolution}")
    if model is None:
        model = archive.load_model()
    cfg = sampler_cfg if sampler_cfg is not None else SamplerConfig()
    cfg = replace(cfg, seed=seed)
    run = run_sampler(model, conditioning, cfg, archive.target_resolution,
                      on_state=on_state)
    grid = state_to_grid(run.final, archive.target_grid.bounds)
    if apply_consistency and len(grid):
        ccfg = consistency_cfg if consistency_cfg is not None else ConsistencyConfig()
        grid = run_consistency(grid, archive.target_grid, ccfg)
    if len(grid):
        mapping = remap_voxelwise_nn(grid, archive.target_grid)
        cloud, skipped = transplant_gaussians(mapping, archive.cloud,
                                              archive.target_grid, grid)
    else:
        cloud, skipped = archive.cloud.select(np.zeros(0, dtype=np.int64)), 0
    return Layer(id=layer_id, primitive_id=archive.name, cloud=cloud,
                 conditioning=conditioning, grid=grid, skipped_voxels=skipped)


def composite_scene(scene: Scene) -> SplatCloud:
    """Concatenate transformed, tone-mapped layers plus static regions."""
    parts: list[SplatCloud] = []
    for layer in scene.layers:
        cloud = transform_cloud(layer.cloud, layer.transform)
        sh = cloud.sh_coeffs.copy()
        sh[:, 0, :] = sh[:, 0, :] * layer.color_gain[None, :].astype(np.float32)
        parts.append(replace(cloud.without_records(), sh_coeffs=sh))
    parts.extend(scene.static_regions)
    if not parts:
        return SplatCloud.empty()
    return concat_clouds(parts)


def export_scene(scene: Scene, path: str, allow_empty: bool = False) -> SplatCloud:
    """Composite and write the scene; refuses empty output unless allowed."""
    cloud = composite_scene(scene)
    if len(cloud) == 0 and not allow_empty:
        raise StateError("refusing to export an empty scene "
                         "(pass allow_empty to force)")
    atomic_write(path, serialize_splat_file(cloud))
    return cloud

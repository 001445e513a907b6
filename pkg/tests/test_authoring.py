"""Primitive archives, ingest projects, brushes, conditioning assembly,
layers, scene compositing, and export."""

import json

import numpy as np
import pytest

from splatforge.authoring import (
    Brush,
    Layer,
    PrimitiveArchive,
    Project,
    Scene,
    assemble_conditioning,
    atomic_write,
    build_exemplar,
    composite_scene,
    export_scene,
    extract_brush,
    generate_layer,
    ingest_cloud,
    transform_from_json,
    transform_to_json,
)
from splatforge.errors import (FormatError, ParameterError, StateError,
                               ValidationError)
from splatforge.features import FeatureConfig
from splatforge.splat_io import Transform, parse_splat_file
from splatforge.voxelize import downsample_to, make_grid
from synthetic_data import random_cloud, torus_cloud

UNIT = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


# ---------------------------------------------------------------- archives


def test_archive_bytes_round_trip(toy_archive):
    data = toy_archive.to_bytes()
    back = PrimitiveArchive.from_bytes(data)
    assert back.name == toy_archive.name
    assert back.seed == toy_archive.seed
    assert back.model_bytes == toy_archive.model_bytes
    for mine, theirs in ((toy_archive.target_grid, back.target_grid),
                         (toy_archive.coarse_grid, back.coarse_grid)):
        assert mine.resolution == theirs.resolution
        np.testing.assert_array_equal(mine.coords, theirs.coords)
        np.testing.assert_array_equal(mine.bounds, theirs.bounds)
        if mine.features is not None:
            np.testing.assert_array_equal(mine.features, theirs.features)
        if mine.payload_offsets is not None:
            np.testing.assert_array_equal(mine.payload_offsets, theirs.payload_offsets)
            np.testing.assert_array_equal(mine.payload_indices, theirs.payload_indices)
    np.testing.assert_array_equal(toy_archive.basis_app.components,
                                  back.basis_app.components)
    np.testing.assert_array_equal(toy_archive.basis_sem.mean, back.basis_sem.mean)
    np.testing.assert_array_equal(toy_archive.cloud.positions, back.cloud.positions)
    np.testing.assert_array_equal(toy_archive.cloud.sh_coeffs, back.cloud.sh_coeffs)
    # second trip is byte-stable
    assert back.to_bytes() == data


def test_archive_save_load(tmp_path, toy_archive):
    path = tmp_path / "prim.sfp"
    toy_archive.save(str(path))
    back = PrimitiveArchive.load(str(path))
    assert back.to_bytes() == toy_archive.to_bytes()


def test_archive_rejects_bad_bytes(toy_archive):
    data = toy_archive.to_bytes()
    with pytest.raises(FormatError):
        PrimitiveArchive.from_bytes(b"JUNK" + data[4:])
    with pytest.raises(FormatError):
        PrimitiveArchive.from_bytes(data + b"\x00")
    bad_version = data[:4] + (99).to_bytes(4, "little") + data[8:]
    with pytest.raises(FormatError):
        PrimitiveArchive.from_bytes(bad_version)


def test_archive_validates_grid_consistency(toy_archive):
    broken = make_grid(toy_archive.coarse_resolution,
                       toy_archive.coarse_grid.bounds,
                       toy_archive.coarse_grid.coords[1:])
    with pytest.raises(ValidationError):
        PrimitiveArchive(name="x", seed=0, model_bytes=toy_archive.model_bytes,
                         target_grid=toy_archive.target_grid, coarse_grid=broken,
                         basis_app=toy_archive.basis_app,
                         basis_sem=toy_archive.basis_sem, cloud=toy_archive.cloud)


def test_archive_exemplar_accessor(toy_archive):
    ex = toy_archive.exemplar()
    np.testing.assert_array_equal(
        ex.coarse.coords,
        downsample_to(toy_archive.target_grid, toy_archive.coarse_resolution).coords)


# ---------------------------------------------------------------- ingest


def test_build_exemplar_produces_featured_grids():
    cloud = torus_cloud(seed=1, n_theta=48, n_phi=16)
    ex, basis_app, basis_sem, reduced = build_exemplar(
        cloud, target_resolution=16, coarse_resolution=8)
    assert ex.target.has_features()
    assert ex.target.features.shape[1] == 8
    assert ex.target.payload_offsets is not None
    assert basis_app.components.shape == (4, 48)
    assert reduced.reduced_features.shape == (len(cloud), 8)


def test_build_exemplar_mask_selection():
    cloud = torus_cloud(seed=1, n_theta=48, n_phi=16)
    mask = np.zeros(len(cloud), bool)
    mask[: len(cloud) // 2] = True
    ex_half, *_ = build_exemplar(cloud, 16, 8, mask=mask)
    ex_full, *_ = build_exemplar(cloud, 16, 8)
    assert len(ex_half.target) < len(ex_full.target)
    with pytest.raises(ParameterError):
        build_exemplar(cloud, 16, 8, mask=np.zeros(len(cloud), bool))


def test_ingest_project_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cloud = random_cloud(seed=3, n=60)
    sidecar = rng.normal(0, 1, (60, 24)).astype(np.float32)
    project = ingest_cloud(cloud, raw_features=sidecar)
    assert not project.cloud.semantic_substituted
    path = tmp_path / "scene.sfproj"
    project.save(str(path))
    back = Project.load(str(path))
    np.testing.assert_array_equal(back.cloud.reduced_features,
                                  project.cloud.reduced_features)
    np.testing.assert_array_equal(back.cloud.raw_features, sidecar)
    np.testing.assert_array_equal(back.basis_app.components,
                                  project.basis_app.components)
    np.testing.assert_array_equal(back.basis_sem.components,
                                  project.basis_sem.components)
    assert back.meta["point_count"] == 60


def test_ingest_without_sidecar_substitutes_semantics():
    project = ingest_cloud(random_cloud(seed=4, n=40))
    assert project.cloud.semantic_substituted
    assert project.cloud.reduced_features.shape == (40, 8)


def test_ingest_sidecar_length_mismatch():
    with pytest.raises(ValidationError):
        ingest_cloud(random_cloud(seed=4, n=40),
                     raw_features=np.zeros((39, 24), np.float32))


def test_project_from_bytes_rejects_non_project(toy_archive):
    with pytest.raises(FormatError):
        Project.from_bytes(toy_archive.to_bytes())


# ---------------------------------------------------------------- brushes


def test_extract_brush_reorigins_selection():
    grid = make_grid(16, UNIT, np.array([[4, 5, 6], [5, 5, 6], [4, 7, 9]]))
    brush = extract_brush(grid, "arch")
    assert brush.name == "arch"
    np.testing.assert_array_equal(brush.extents, [2, 3, 4])
    np.testing.assert_array_equal(
        brush.cells, np.array([[0, 0, 0], [0, 2, 3], [1, 0, 0]]))
    with pytest.raises(ParameterError):
        extract_brush(make_grid(16, UNIT, np.zeros((0, 3), np.int64)), "x")


def test_brush_json_round_trip():
    brush = Brush("b", np.array([2, 2, 2]),
                  np.array([[0, 0, 0], [1, 1, 1]], np.int32))
    obj = json.loads(json.dumps(brush.to_json_dict()))
    back = Brush.from_json_dict(obj)
    assert back.name == "b"
    np.testing.assert_array_equal(back.extents, brush.extents)
    np.testing.assert_array_equal(back.cells, brush.cells)


def test_brush_json_rejects_malformed():
    good = Brush("b", np.array([2, 2, 2]),
                 np.array([[0, 0, 0]], np.int32)).to_json_dict()
    for mutate in (
        lambda o: o.pop("cells"),
        lambda o: o.update(cells=[]),
        lambda o: o.update(cells=[[0, 0, 5]]),       # outside extents
        lambda o: o.update(cells=[[-1, 0, 0]]),
        lambda o: o.update(extents="wide"),
    ):
        obj = json.loads(json.dumps(good))
        mutate(obj)
        with pytest.raises(FormatError):
            Brush.from_json_dict(obj)


# ---------------------------------------------------------------- edits


def test_assemble_conditioning_add_remove_stamp():
    brush = Brush("b", np.array([2, 1, 1]),
                  np.array([[0, 0, 0], [1, 0, 0]], np.int32)).to_json_dict()
    edits = [
        {"op": "add", "cell": [1, 1, 1]},
        {"op": "add", "cell": [2, 2, 2]},
        {"op": "remove", "cell": [1, 1, 1]},
        {"op": "stamp", "brush": brush, "offset": [4, 4, 4]},
    ]
    grid, report = assemble_conditioning(edits, 8, UNIT)
    assert report == []
    np.testing.assert_array_equal(grid.coords,
                                  [[2, 2, 2], [4, 4, 4], [5, 4, 4]])


def test_assemble_conditioning_reports_rejected_edits():
    brush = Brush("b", np.array([3, 1, 1]),
                  np.array([[0, 0, 0], [2, 0, 0]], np.int32)).to_json_dict()
    edits = [
        {"op": "add", "cell": [9, 0, 0]},                 # out of bounds
        {"op": "stamp", "brush": brush, "offset": [6, 0, 0]},  # extends past edge
        {"op": "teleport", "cell": [0, 0, 0]},            # unknown op
        {"op": "add"},                                     # missing key
        {"op": "add", "cell": [1, 1, 1]},                 # fine
    ]
    grid, report = assemble_conditioning(edits, 8, UNIT)
    assert [r["index"] for r in report] == [0, 1, 2, 3]
    assert all(r["reason"] for r in report)
    np.testing.assert_array_equal(grid.coords, [[1, 1, 1]])


def test_assemble_conditioning_mesh_edit():
    verts = [[0.1, 0.1, 0.5], [0.9, 0.1, 0.5], [0.9, 0.9, 0.5], [0.1, 0.9, 0.5]]
    faces = [[0, 1, 2], [0, 2, 3]]
    grid, report = assemble_conditioning(
        [{"op": "mesh", "vertices": verts, "faces": faces}], 8, UNIT)
    assert report == []
    assert len(grid) > 0
    assert set(np.unique(grid.coords[:, 2]).tolist()) <= {3, 4}


def test_assemble_conditioning_empty_edit_list():
    grid, report = assemble_conditioning([], 8, UNIT)
    assert len(grid) == 0 and report == []


# ---------------------------------------------------------------- transforms


def test_transform_json_round_trip():
    rng = np.random.default_rng(0)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    from splatforge.sh import quat_to_matrix
    t = Transform.from_parts(rotation=quat_to_matrix(q),
                             translation=np.array([0.5, -1.0, 2.0]),
                             scale=1.7)
    back = transform_from_json(json.loads(json.dumps(transform_to_json(t))))
    np.testing.assert_allclose(back.rotation, t.rotation, atol=1e-12)
    np.testing.assert_allclose(back.translation, t.translation, atol=1e-12)
    assert back.scale == pytest.approx(1.7)


def test_transform_json_defaults_and_errors():
    ident = transform_from_json({})
    np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-15)
    np.testing.assert_array_equal(ident.translation, 0.0)
    assert ident.scale == 1.0
    with pytest.raises(FormatError):
        transform_from_json({"quaternion": [0.0, 0.0, 0.0, 0.0]})


# ---------------------------------------------------------------- layers


def test_generate_layer_is_deterministic(toy_archive):
    a = generate_layer(toy_archive, toy_archive.coarse_grid, seed=1)
    b = generate_layer(toy_archive, toy_archive.coarse_grid, seed=1)
    np.testing.assert_array_equal(a.grid.coords, b.grid.coords)
    np.testing.assert_array_equal(a.cloud.positions, b.cloud.positions)
    np.testing.assert_array_equal(a.cloud.sh_coeffs, b.cloud.sh_coeffs)
    assert len(a.cloud) > 0
    assert a.skipped_voxels >= 0
    assert a.primitive_id == toy_archive.name


def test_generate_layer_streams_states(toy_archive):
    seen = []
    generate_layer(toy_archive, toy_archive.coarse_grid, seed=2,
                   on_state=lambda t, s: seen.append(t))
    assert seen == list(range(1, 9))  # seven stochastic steps + mode seeking


def test_generate_layer_without_consistency(toy_archive):
    layer = generate_layer(toy_archive, toy_archive.coarse_grid, seed=3,
                           apply_consistency=False)
    assert layer.grid is not None
    assert len(layer.cloud) >= len(layer.grid) > 0


def test_generate_layer_validation(toy_archive):
    empty = make_grid(toy_archive.coarse_resolution,
                      toy_archive.coarse_grid.bounds, np.zeros((0, 3), np.int64))
    with pytest.raises(ParameterError):
        generate_layer(toy_archive, empty, seed=0)
    wrong = make_grid(toy_archive.coarse_resolution * 2,
                      toy_archive.coarse_grid.bounds, np.array([[0, 0, 0]]))
    with pytest.raises(ParameterError):
        generate_layer(toy_archive, wrong, seed=0)


def test_layer_validation_and_describe(toy_archive):
    layer = generate_layer(toy_archive, toy_archive.coarse_grid, seed=4,
                           layer_id="L7")
    desc = layer.describe()
    assert desc["id"] == "L7"
    assert desc["point_count"] == len(layer.cloud)
    assert desc["transform"]["scale"] == 1.0
    with pytest.raises(ParameterError):
        Layer(id="x", primitive_id="p", cloud=layer.cloud,
              conditioning=layer.conditioning,
              transform=Transform.from_parts(np.eye(3), np.zeros(3), 0.0))


# ---------------------------------------------------------------- scenes


def test_scene_rejects_duplicate_layer_ids(toy_archive):
    layer = generate_layer(toy_archive, toy_archive.coarse_grid, seed=5)
    with pytest.raises(ValidationError):
        Scene(layers=[layer, layer])
    scene = Scene(layers=[layer])
    assert scene.layer_by_id(layer.id) is layer
    with pytest.raises(ParameterError):
        scene.layer_by_id("nope")


def test_composite_scene_applies_transform_and_gain(toy_archive):
    layer = generate_layer(toy_archive, toy_archive.coarse_grid, seed=6)
    layer.transform = Transform.from_parts(np.eye(3), np.array([1.0, 0.0, 0.0]), 1.0)
    layer.color_gain = np.array([2.0, 0.5, 1.0])
    out = composite_scene(Scene(layers=[layer]))
    np.testing.assert_allclose(out.positions,
                               layer.cloud.positions + np.array([1, 0, 0],
                                                                np.float32),
                               atol=1e-6)
    np.testing.assert_allclose(out.sh_coeffs[:, 0, 0],
                               layer.cloud.sh_coeffs[:, 0, 0] * 2.0, atol=1e-6)
    np.testing.assert_allclose(out.sh_coeffs[:, 0, 1],
                               layer.cloud.sh_coeffs[:, 0, 1] * 0.5, atol=1e-6)
    np.testing.assert_array_equal(out.sh_coeffs[:, 1:, :],
                                  layer.cloud.sh_coeffs[:, 1:, :])


def test_composite_scene_appends_static_regions(toy_archive):
    layer = generate_layer(toy_archive, toy_archive.coarse_grid, seed=7)
    static = random_cloud(seed=9, n=11)
    out = composite_scene(Scene(layers=[layer], static_regions=[static]))
    assert len(out) == len(layer.cloud) + 11
    np.testing.assert_array_equal(out.positions[-11:], static.positions)


def test_composite_empty_scene():
    assert len(composite_scene(Scene())) == 0


def test_export_scene(tmp_path, toy_archive):
    layer = generate_layer(toy_archive, toy_archive.coarse_grid, seed=8)
    path = tmp_path / "out.ply"
    cloud = export_scene(Scene(layers=[layer]), str(path))
    with open(path, "rb") as fh:
        back = parse_splat_file(fh.read())
    assert len(back) == len(cloud) == len(layer.cloud)
    with pytest.raises(StateError):
        export_scene(Scene(), str(tmp_path / "empty.ply"))
    empty = export_scene(Scene(), str(tmp_path / "empty.ply"), allow_empty=True)
    assert len(empty) == 0
    with open(tmp_path / "empty.ply", "rb") as fh:
        assert len(parse_splat_file(fh.read())) == 0


def test_atomic_write_overwrites(tmp_path):
    path = tmp_path / "nested" / "file.bin"
    atomic_write(str(path), b"first")
    atomic_write(str(path), b"second")
    with open(path, "rb") as fh:
        assert fh.read() == b"second"
    assert not any(p.name.endswith(".tmp") for p in path.parent.iterdir())

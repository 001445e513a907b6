"""HTTP/JSON service exposing the training and generation pipeline.

Jobs run on one worker thread per primitive: FIFO within a primitive,
concurrent across primitives, and at most one training job per primitive at
a time.  Splat payloads travel as binary bodies (or base64 inside JSON);
everything else is JSON.  Intermediate sampler states are appended to the
job record for polling clients.
"""

from __future__ import annotations

import base64
import binascii
import itertools
import json
import os
import queue
import threading
import uuid
from dataclasses import dataclass, field, replace

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response

from .authoring import (ARCHIVE_MAGIC, Layer, PrimitiveArchive, Scene,
                        assemble_conditioning, atomic_write, composite_scene,
                        generate_layer, serialize_splat_file, train_archive,
                        transform_from_json)
from .consistency import ConsistencyConfig
from .errors import SplatForgeError
from .gca import SamplerConfig
from .net.unet import NetworkConfig
from .splat_io import parse_feature_sidecar, parse_splat_file
from .training import InfusionSchedule
from .voxelize import grid_from_json_dict, grid_to_json_dict


@dataclass
class JobRecord:
    id: str
    kind: str                      # "train" | "generate"
    primitive_id: str
    seed: int
    status: str = "queued"         # queued -> running -> done | failed
    progress: float = 0.0
    error: str | None = None
    states: list[dict] = field(default_factory=list)
    result: dict | None = None
    splat_bytes: bytes | None = None
    layer: Layer | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    _ORDER = {"queued": 0, "running": 1, "done": 2, "failed": 2}

    def set_status(self, status: str) -> None:
        with self._lock:
            if self._ORDER[status] < self._ORDER[self.status]:
                raise ValueError("job status transitions must be monotone")
            self.status = status

    def set_progress(self, value: float) -> None:
        with self._lock:
            self.progress = max(self.progress, min(float(value), 1.0))

    def append_state(self, state: dict) -> None:
        with self._lock:
            self.states.append(state)

    def snapshot(self, include_states: bool = True) -> dict:
        with self._lock:
            out = {"id": self.id, "kind": self.kind,
                   "primitive_id": self.primitive_id, "seed": self.seed,
                   "status": self.status, "progress": self.progress,
                   "error": self.error, "state_count": len(self.states)}
            if include_states:
                out["states"] = list(self.states)
            return out


@dataclass
class PrimitiveRecord:
    id: str
    name: str
    status: str = "new"            # new | training | ready | failed
    archive: PrimitiveArchive | None = None
    archive_path: str | None = None
    error: str | None = None

    def describe(self) -> dict:
        out = {"id": self.id, "name": self.name, "status": self.status,
               "error": self.error}
        if self.archive is not None:
            out.update({
                "target_resolution": self.archive.target_resolution,
                "coarse_resolution": self.archive.coarse_resolution,
                "exemplar_cells": len(self.archive.target_grid),
                "point_count": len(self.archive.cloud),
            })
        return out


class _PrimitiveWorker:
    """One FIFO queue + thread per primitive."""

    def __init__(self, run_job):
        self.queue: queue.Queue = queue.Queue()
        self._run_job = run_job
        self.thread = threading.Thread(target=self._loop, daemon=True)
        self.thread.start()

    def _loop(self) -> None:
        while True:
            item = self.queue.get()
            if item is None:
                return
            self._run_job(*item)
            self.queue.task_done()


class ServiceState:
    def __init__(self, data_dir: str | None = None):
        self.data_dir = data_dir
        self.lock = threading.Lock()
        self.primitives: dict[str, PrimitiveRecord] = {}
        self.jobs: dict[str, JobRecord] = {}
        self.scenes: dict[str, Scene] = {}
        self.workers: dict[str, _PrimitiveWorker] = {}
        self._seed_counter = itertools.count()
        self._id_counter = itertools.count(1)

    def next_seed(self) -> int:
        with self.lock:
            return next(self._seed_counter)

    def new_id(self, prefix: str) -> str:
        with self.lock:
            return f"{prefix}-{next(self._id_counter)}-{uuid.uuid4().hex[:8]}"

    def submit(self, primitive_id: str, job: JobRecord, fn) -> None:
        with self.lock:
            self.jobs[job.id] = job
            worker = self.workers.get(primitive_id)
            if worker is None:
                worker = _PrimitiveWorker(self._run)
                self.workers[primitive_id] = worker
        worker.queue.put((job, fn))

    def _run(self, job: JobRecord, fn) -> None:
        job.set_status("running")
        try:
            fn(job)
        except Exception as e:  # surfaced on the job record
            job.error = f"{type(e).__name__}: {e}"
            job.set_status("failed")
            return
        job.set_progress(1.0)
        job.set_status("done")

    def has_active_train(self, primitive_id: str) -> bool:
        with self.lock:
            return any(j.kind == "train" and j.primitive_id == primitive_id
                       and j.status in ("queued", "running")
                       for j in self.jobs.values())


def _bad_request(message: str) -> HTTPException:
    return HTTPException(status_code=400, detail=message)


def _b64_bytes(text: str, what: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError):
        raise _bad_request(f"invalid base64 in {what}") from None


def _net_config(body: dict) -> NetworkConfig:
    return NetworkConfig(base_channels=int(body.get("base_channels", 16)),
                         depth=int(body.get("depth", 2)))


def _schedule(body: dict) -> InfusionSchedule:
    return InfusionSchedule(alpha0=float(body.get("alpha0", 0.1)),
                            alphaT=float(body.get("alphaT", 0.25)),
                            T_train=int(body.get("T_train", 5)),
                            lambda_z=float(body.get("lambda_z", 0.01)),
                            iterations=int(body.get("iterations", 10000)))


def create_app(data_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="splatforge", version="0.1.0")
    state = ServiceState(data_dir)
    app.state.service = state

    @app.exception_handler(SplatForgeError)
    def _domain_error(_request, exc: SplatForgeError):
        from fastapi.responses import JSONResponse
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    from fastapi.exceptions import RequestValidationError

    @app.exception_handler(RequestValidationError)
    def _invalid_body(_request, exc: RequestValidationError):
        from fastapi.responses import JSONResponse
        return JSONResponse(status_code=400,
                            content={"detail": f"invalid body: {exc.errors()}"})

    # -- primitives ---------------------------------------------------------

    def _register_archive(record: PrimitiveRecord, archive: PrimitiveArchive) -> None:
        record.archive = archive
        if state.data_dir is not None:
            path = os.path.join(state.data_dir, f"{record.id}.sfar")
            atomic_write(path, archive.to_bytes())
            record.archive_path = path
        record.status = "ready"

    def _enqueue_train(record: PrimitiveRecord, cloud, mask, body: dict,
                       seed: int) -> JobRecord:
        job = JobRecord(id=state.new_id("job"), kind="train",
                        primitive_id=record.id, seed=seed)
        net_cfg = _net_config(body)
        schedule = _schedule(body)
        lr = float(body.get("lr", 5e-4))
        wd = float(body.get("wd", 1e-6))
        target_res = int(body.get("target_resolution", 64))
        coarse_res = int(body.get("coarse_resolution", 16))
        allow_any = bool(body.get("allow_any_resolution", False))
        record.status = "training"

        def run(j: JobRecord) -> None:
            total = max(schedule.iterations, 1)

            def on_progress(rec) -> None:
                j.set_progress(rec.iteration / total)

            try:
                archive, _log = train_archive(
                    cloud, record.name, seed=seed,
                    target_resolution=target_res, coarse_resolution=coarse_res,
                    net_cfg=net_cfg, schedule=schedule, mask=mask,
                    progress=on_progress, lr=lr, weight_decay=wd,
                    allow_any_resolution=allow_any)
            except Exception:
                record.status = "failed"
                raise
            _register_archive(record, archive)
            j.result = {"primitive_id": record.id, "status": "ready"}

        state.submit(record.id, job, run)
        return job

    @app.post("/primitives")
    async def create_primitive(request: Request):
        content_type = request.headers.get("content-type", "")
        raw = await request.body()
        if content_type.startswith("application/json"):
            try:
                body = json.loads(raw) if raw else {}
            except json.JSONDecodeError as e:
                raise _bad_request(f"invalid JSON body: {e}")
        else:
            body = dict(request.query_params)
            body["_binary"] = raw

        name = str(body.get("name", "primitive"))
        record = PrimitiveRecord(id=state.new_id("prim"), name=name)

        blob = body.get("_binary") if "_binary" in body else None
        if blob is None and "archive_b64" in body:
            blob = _b64_bytes(body["archive_b64"], "archive_b64")
        if blob is not None and blob[:4] == ARCHIVE_MAGIC:
            archive = PrimitiveArchive.from_bytes(blob)
            with state.lock:
                state.primitives[record.id] = record
            _register_archive(record, archive)
            return {"id": record.id, "name": record.name, "status": record.status}

        if blob is not None:
            splat_bytes = blob
        elif "splat_b64" in body:
            splat_bytes = _b64_bytes(body["splat_b64"], "splat_b64")
        else:
            raise _bad_request("missing splat payload "
                               "(binary body, splat_b64, or archive_b64)")
        cloud = parse_splat_file(splat_bytes)
        if "features_b64" in body and body["features_b64"]:
            raw_feats = parse_feature_sidecar(_b64_bytes(body["features_b64"],
                                                         "features_b64"))
            if len(raw_feats) != len(cloud):
                raise _bad_request("feature sidecar row count mismatch")
            cloud = replace(cloud, raw_features=raw_feats)
        mask = None
        if body.get("mask") is not None:
            mask = np.zeros(len(cloud), dtype=bool)
            idx = np.asarray(body["mask"], dtype=np.int64)
            if len(idx) and (idx.min() < 0 or idx.max() >= len(cloud)):
                raise _bad_request("mask index out of range")
            mask[idx] = True

        seed = int(body["seed"]) if body.get("seed") is not None else state.next_seed()
        with state.lock:
            state.primitives[record.id] = record
        job = _enqueue_train(record, cloud, mask, body, seed)
        return {"id": record.id, "name": record.name, "job_id": job.id,
                "seed": seed, "status": record.status}

    @app.get("/primitives")
    def list_primitives():
        with state.lock:
            records = list(state.primitives.values())
        return {"primitives": [r.describe() for r in records]}

    def _get_primitive(primitive_id: str) -> PrimitiveRecord:
        with state.lock:
            record = state.primitives.get(primitive_id)
        if record is None:
            raise HTTPException(status_code=404,
                                detail=f"unknown primitive {primitive_id}")
        return record

    @app.get("/primitives/{primitive_id}")
    def get_primitive(primitive_id: str):
        return _get_primitive(primitive_id).describe()

    @app.post("/primitives/{primitive_id}/train")
    def retrain_primitive(primitive_id: str, body: dict | None = None):
        record = _get_primitive(primitive_id)
        if state.has_active_train(primitive_id):
            raise HTTPException(status_code=409,
                                detail="a training job is already active "
                                       "for this primitive")
        if record.archive is None:
            raise HTTPException(status_code=409,
                                detail="primitive has no archive to retrain from")
        body = body or {}
        seed = int(body["seed"]) if body.get("seed") is not None else state.next_seed()
        cloud = record.archive.cloud
        job = _enqueue_train(record, cloud, None, body, seed)
        return {"id": record.id, "job_id": job.id, "seed": seed}

    # -- generation ---------------------------------------------------------

    @app.post("/primitives/{primitive_id}/generate")
    def generate(primitive_id: str, body: dict):
        record = _get_primitive(primitive_id)
        if record.archive is None and not state.has_active_train(primitive_id):
            raise HTTPException(status_code=409,
                                detail="primitive is not trained")
        cond_obj = body.get("conditioning")
        if cond_obj is None and body.get("edits") is None:
            raise _bad_request("missing conditioning")

        seed = int(body["seed"]) if body.get("seed") is not None else state.next_seed()
        job = JobRecord(id=state.new_id("job"), kind="generate",
                        primitive_id=primitive_id, seed=seed)
        T_infer = int(body.get("T_infer", 7))
        sampler_cfg = SamplerConfig(T_infer=T_infer, seed=seed)
        consistency_cfg = ConsistencyConfig(
            l=int(body.get("l", 5)),
            iterations=int(body.get("consistency_iterations", 7)),
            w=float(body.get("w", 0.5)), beta=float(body.get("beta", 0.5)),
            lambda_patch=int(body.get("lambda_patch", 2)))
        apply_consistency = bool(body.get("consistency", True))

        def resolve_conditioning(archive: PrimitiveArchive):
            if cond_obj is not None:
                return grid_from_json_dict(cond_obj)
            grid, rejected = assemble_conditioning(
                body["edits"], archive.coarse_resolution,
                archive.coarse_grid.bounds)
            if rejected:
                job.append_state({"rejected_edits": rejected})
            return grid

        resolved: dict = {"grid": None}
        if record.archive is not None:
            # Validate eagerly so bad requests fail with 400, not a failed job.
            grid = resolve_conditioning(record.archive)
            if len(grid) == 0:
                raise _bad_request("empty conditioning")
            if grid.resolution != record.archive.coarse_resolution:
                raise _bad_request(
                    f"conditioning resolution {grid.resolution} does not "
                    f"match primitive coarse resolution "
                    f"{record.archive.coarse_resolution}")
            resolved["grid"] = grid

        def run(j: JobRecord) -> None:
            archive = record.archive
            if archive is None:
                raise RuntimeError("primitive training did not produce an archive")
            conditioning = (resolved["grid"] if resolved["grid"] is not None
                            else resolve_conditioning(archive))
            if len(conditioning) == 0:
                raise SplatForgeError("empty conditioning")
            total = T_infer + 1

            def on_state(t: int, st) -> None:
                j.append_state({"step": t,
                                "grid": grid_to_json_dict(
                                    _state_grid(st, archive))})
                j.set_progress((t + 1) / total)

            layer = generate_layer(archive, conditioning, seed,
                                   layer_id=j.id, sampler_cfg=sampler_cfg,
                                   consistency_cfg=consistency_cfg,
                                   apply_consistency=apply_consistency,
                                   on_state=on_state)
            j.layer = layer
            j.splat_bytes = serialize_splat_file(layer.cloud)
            j.result = {"grid": grid_to_json_dict(layer.grid),
                        "point_count": len(layer.cloud),
                        "skipped_voxels": layer.skipped_voxels,
                        "seed": seed}

        state.submit(primitive_id, job, run)
        return {"job_id": job.id, "seed": seed, "status": job.status}

    def _state_grid(st, archive: PrimitiveArchive):
        from .gca import state_to_grid
        return state_to_grid(st, archive.target_grid.bounds)

    # -- jobs ---------------------------------------------------------------

    def _get_job(job_id: str) -> JobRecord:
        with state.lock:
            job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id}")
        return job

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        return _get_job(job_id).snapshot()

    @app.get("/jobs/{job_id}/result")
    def get_job_result(job_id: str):
        job = _get_job(job_id)
        snap = job.snapshot(include_states=False)
        if snap["status"] == "failed":
            raise HTTPException(status_code=409,
                                detail=f"job failed: {job.error}")
        if snap["status"] != "done":
            raise HTTPException(status_code=409, detail="job not finished")
        return job.result or {}

    @app.get("/jobs/{job_id}/result/splat")
    def get_job_splat(job_id: str):
        job = _get_job(job_id)
        if job.snapshot(include_states=False)["status"] != "done":
            raise HTTPException(status_code=409, detail="job not finished")
        if job.splat_bytes is None:
            raise HTTPException(status_code=404,
                                detail="job has no splat payload")
        return Response(content=job.splat_bytes,
                        media_type="application/octet-stream")

    # -- scenes -------------------------------------------------------------

    def _get_scene(scene_id: str) -> Scene:
        with state.lock:
            scene = state.scenes.get(scene_id)
        if scene is None:
            raise HTTPException(status_code=404,
                                detail=f"unknown scene {scene_id}")
        return scene

    def _scene_payload(scene_id: str, scene: Scene) -> dict:
        return {"id": scene_id, "name": scene.name,
                "layers": [layer.describe() for layer in scene.layers]}

    @app.post("/scenes")
    def create_scene(body: dict | None = None):
        body = body or {}
        scene_id = state.new_id("scene")
        with state.lock:
            state.scenes[scene_id] = Scene(name=str(body.get("name", "")))
        return {"id": scene_id, "name": state.scenes[scene_id].name}

    @app.get("/scenes")
    def list_scenes():
        with state.lock:
            items = [(sid, s) for sid, s in state.scenes.items()]
        return {"scenes": [_scene_payload(sid, s) for sid, s in items]}

    @app.get("/scenes/{scene_id}")
    def get_scene(scene_id: str):
        return _scene_payload(scene_id, _get_scene(scene_id))

    @app.delete("/scenes/{scene_id}")
    def delete_scene(scene_id: str):
        _get_scene(scene_id)
        with state.lock:
            state.scenes.pop(scene_id, None)
        return {"ok": True}

    def _layer_from_body(scene: Scene, body: dict) -> Layer:
        job = _get_job(str(body.get("job_id", "")))
        if job.snapshot(include_states=False)["status"] != "done" or job.layer is None:
            raise HTTPException(status_code=409,
                                detail="generation job is not finished")
        layer = job.layer
        transform = (transform_from_json(body["transform"])
                     if body.get("transform") else layer.transform)
        gain = body.get("color_gain", [1.0, 1.0, 1.0])
        return Layer(id=state.new_id("layer"), primitive_id=layer.primitive_id,
                     cloud=layer.cloud, conditioning=layer.conditioning,
                     transform=transform, color_gain=gain, grid=layer.grid)

    @app.post("/scenes/{scene_id}/layers")
    def add_layer(scene_id: str, body: dict):
        scene = _get_scene(scene_id)
        layer = _layer_from_body(scene, body)
        with state.lock:
            scene.layers.append(layer)
        return {"layer_id": layer.id, "scene": _scene_payload(scene_id, scene)}

    @app.put("/scenes/{scene_id}/layers/{layer_id}")
    def update_layer(scene_id: str, layer_id: str, body: dict):
        scene = _get_scene(scene_id)
        with state.lock:
            layer = scene.layer_by_id(layer_id)
            if body.get("transform") is not None:
                layer.transform = transform_from_json(body["transform"])
            if body.get("color_gain") is not None:
                layer.color_gain = np.asarray(body["color_gain"],
                                              dtype=np.float64).reshape(3)
        return {"layer": layer.describe()}

    @app.post("/scenes/{scene_id}/layers/{layer_id}/duplicate")
    def duplicate_layer(scene_id: str, layer_id: str):
        scene = _get_scene(scene_id)
        copy_id = state.new_id("layer")  # state.lock is not reentrant
        with state.lock:
            src = scene.layer_by_id(layer_id)
            copy = Layer(id=copy_id,
                         primitive_id=src.primitive_id, cloud=src.cloud,
                         conditioning=src.conditioning, transform=src.transform,
                         color_gain=src.color_gain.copy(), grid=src.grid)
            scene.layers.append(copy)
        return {"layer_id": copy.id, "scene": _scene_payload(scene_id, scene)}

    @app.delete("/scenes/{scene_id}/layers/{layer_id}")
    def delete_layer(scene_id: str, layer_id: str):
        scene = _get_scene(scene_id)
        with state.lock:
            layer = scene.layer_by_id(layer_id)
            scene.layers.remove(layer)
        return {"scene": _scene_payload(scene_id, scene)}

    @app.post("/scenes/{scene_id}/export")
    def export_scene_endpoint(scene_id: str, body: dict | None = None):
        scene = _get_scene(scene_id)
        body = body or {}
        cloud = composite_scene(scene)
        if len(cloud) == 0 and not body.get("allow_empty", False):
            raise HTTPException(status_code=409,
                                detail="scene composites to an empty cloud "
                                       "(pass allow_empty to force)")
        return Response(content=serialize_splat_file(cloud),
                        media_type="application/octet-stream")

    return app

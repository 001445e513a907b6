/**
 * Pure-data rendering layer. Cameras project world points to normalized
 * device coordinates; voxel states and splat payloads become draw lists of
 * screen-aligned sprites (colored by feature channels or SH DC); picking
 * runs a ray-grid traversal client-side. No GL here: the hosting canvas
 * binding consumes the draw lists, and the tests assert on them directly.
 */

import { ClientGrid, GridJson, cellKey, keyCell } from "./grid.js";
import { ParsedSplat, SH_C0 } from "./splat.js";

export type Vec3 = [number, number, number];

export interface CameraState {
  position: Vec3;
  target: Vec3;
  up: Vec3;
  /** Vertical field of view in radians. */
  fovY: number;
  aspect: number;
  near: number;
  far: number;
}

export function createCamera(partial: Partial<CameraState> = {}): CameraState {
  return {
    position: partial.position ?? [2.5, 2.0, 2.5],
    target: partial.target ?? [0.5, 0.5, 0.5],
    up: partial.up ?? [0, 1, 0],
    fovY: partial.fovY ?? Math.PI / 4,
    aspect: partial.aspect ?? 16 / 9,
    near: partial.near ?? 0.01,
    far: partial.far ?? 100,
  };
}

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function add(a: Vec3, b: Vec3): Vec3 {
  return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

function scale(a: Vec3, s: number): Vec3 {
  return [a[0] * s, a[1] * s, a[2] * s];
}

function dot(a: Vec3, b: Vec3): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function normalize(a: Vec3): Vec3 {
  const n = Math.hypot(a[0], a[1], a[2]);
  if (!(n > 0)) throw new Error("cannot normalize a zero vector");
  return [a[0] / n, a[1] / n, a[2] / n];
}

export interface CameraBasis {
  right: Vec3;
  trueUp: Vec3;
  forward: Vec3;
}

export function cameraBasis(cam: CameraState): CameraBasis {
  const forward = normalize(sub(cam.target, cam.position));
  const right = normalize(cross(forward, cam.up));
  const trueUp = cross(right, forward);
  return { right, trueUp, forward };
}

export interface ProjectedPoint {
  /** Normalized device coordinates in [-1, 1] when visible. */
  x: number;
  y: number;
  /** View-space distance along the camera forward axis. */
  depth: number;
  visible: boolean;
}

export function projectPoint(cam: CameraState, p: Vec3): ProjectedPoint {
  const { right, trueUp, forward } = cameraBasis(cam);
  const rel = sub(p, cam.position);
  const depth = dot(rel, forward);
  const tanHalf = Math.tan(cam.fovY / 2);
  if (depth < cam.near || depth > cam.far) {
    return { x: 0, y: 0, depth, visible: false };
  }
  const x = dot(rel, right) / (depth * tanHalf * cam.aspect);
  const y = dot(rel, trueUp) / (depth * tanHalf);
  const visible = x >= -1 && x <= 1 && y >= -1 && y <= 1;
  return { x, y, depth, visible };
}

export function orbitCamera(cam: CameraState, dYaw: number, dPitch: number): void {
  const offset = sub(cam.position, cam.target);
  const radius = Math.hypot(offset[0], offset[1], offset[2]);
  let yaw = Math.atan2(offset[0], offset[2]);
  let pitch = Math.asin(Math.min(Math.max(offset[1] / radius, -1), 1));
  yaw += dYaw;
  pitch = Math.min(Math.max(pitch + dPitch, -1.45), 1.45);
  cam.position = add(cam.target, [
    radius * Math.cos(pitch) * Math.sin(yaw),
    radius * Math.sin(pitch),
    radius * Math.cos(pitch) * Math.cos(yaw),
  ]);
}

export function dollyCamera(cam: CameraState, factor: number): void {
  if (!(factor > 0)) throw new Error("dolly factor must be > 0");
  const offset = sub(cam.position, cam.target);
  cam.position = add(cam.target, scale(offset, factor));
}

// ---------------------------------------------------------------------------
// Sprite draw lists
// ---------------------------------------------------------------------------

export interface Sprite {
  x: number;
  y: number;
  depth: number;
  /** Projected radius in NDC y units. */
  size: number;
  color: [number, number, number];
  alpha: number;
  /** Screen-space rotation of the sprite's major axis, radians. */
  angle: number;
}

function clamp01(v: number): number {
  return Math.min(Math.max(v, 0), 1);
}

/** Map a cell feature vector to a preview color; featureless cells get slate. */
export function featureColor(feature: number[] | null | undefined): [number, number, number] {
  if (!feature || feature.length < 3) return [0.62, 0.66, 0.72];
  const squash = (v: number) => clamp01(0.5 + Math.tanh(v) * 0.5);
  return [squash(feature[0]!), squash(feature[1]!), squash(feature[2]!)];
}

function cellCenter(
  boundsLo: number[],
  cellSize: number[],
  xyz: number[],
): Vec3 {
  return [
    boundsLo[0]! + (xyz[0]! + 0.5) * cellSize[0]!,
    boundsLo[1]! + (xyz[1]! + 0.5) * cellSize[1]!,
    boundsLo[2]! + (xyz[2]! + 0.5) * cellSize[2]!,
  ];
}

function gridCellSize(resolution: number, bounds: number[][]): number[] {
  return [0, 1, 2].map(
    (axis) => (bounds[1]![axis]! - bounds[0]![axis]!) / resolution,
  );
}

/** One sprite per occupied cell, colored by the leading feature channels. */
export function voxelSprites(grid: GridJson, cam: CameraState): Sprite[] {
  const cellSize = gridCellSize(grid.resolution, grid.bounds);
  const tanHalf = Math.tan(cam.fovY / 2);
  const radius = 0.5 * Math.max(cellSize[0]!, cellSize[1]!, cellSize[2]!);
  const sprites: Sprite[] = [];
  for (const cell of grid.cells) {
    const center = cellCenter(grid.bounds[0]!, cellSize, cell.xyz);
    const proj = projectPoint(cam, center);
    sprites.push({
      x: proj.x,
      y: proj.y,
      depth: proj.depth,
      size: proj.depth > 0 ? radius / (proj.depth * tanHalf) : 0,
      color: featureColor(cell.feature),
      alpha: 1,
      angle: 0,
    });
  }
  return sprites;
}

export function shDcToRgb(dc: ArrayLike<number>): [number, number, number] {
  return [
    clamp01(0.5 + SH_C0 * dc[0]!),
    clamp01(0.5 + SH_C0 * dc[1]!),
    clamp01(0.5 + SH_C0 * dc[2]!),
  ];
}

function sigmoid(v: number): number {
  return 1 / (1 + Math.exp(-v));
}

/** Rotate a vector by a (w,x,y,z) unit quaternion. */
function quatRotate(q: ArrayLike<number>, v: Vec3): Vec3 {
  const w = q[0]!, x = q[1]!, y = q[2]!, z = q[3]!;
  const t: Vec3 = scale(cross([x, y, z], v), 2);
  return add(add(v, scale(t, w)), cross([x, y, z], t));
}

/**
 * One screen-aligned sprite per Gaussian, colored by SH DC and oriented by
 * the projection of the Gaussian's widest principal axis. View-dependent
 * shading is deliberately out of scope; this preview informs authoring only.
 */
export function splatSprites(
  splat: ParsedSplat,
  cam: CameraState,
  colorGain: number[] = [1, 1, 1],
): Sprite[] {
  const { right, trueUp } = cameraBasis(cam);
  const tanHalf = Math.tan(cam.fovY / 2);
  const sprites: Sprite[] = [];
  for (let i = 0; i < splat.count; i++) {
    const p: Vec3 = [
      splat.positions[3 * i]!,
      splat.positions[3 * i + 1]!,
      splat.positions[3 * i + 2]!,
    ];
    const proj = projectPoint(cam, p);
    const scales = [
      Math.exp(splat.logScales[3 * i]!),
      Math.exp(splat.logScales[3 * i + 1]!),
      Math.exp(splat.logScales[3 * i + 2]!),
    ];
    let major = 0;
    if (scales[1]! > scales[major]!) major = 1;
    if (scales[2]! > scales[major]!) major = 2;
    const axisWorld: Vec3 = [0, 0, 0];
    axisWorld[major] = 1;
    const q = splat.rotations.subarray(4 * i, 4 * i + 4);
    const axis = quatRotate(q, axisWorld);
    const angle = Math.atan2(dot(axis, trueUp), dot(axis, right));
    const dc = splat.shDc.subarray(3 * i, 3 * i + 3);
    const base = shDcToRgb(dc);
    sprites.push({
      x: proj.x,
      y: proj.y,
      depth: proj.depth,
      size:
        proj.depth > 0 ? scales[major]! / (proj.depth * tanHalf) : 0,
      color: [
        clamp01(base[0] * (colorGain[0] ?? 1)),
        clamp01(base[1] * (colorGain[1] ?? 1)),
        clamp01(base[2] * (colorGain[2] ?? 1)),
      ],
      alpha: sigmoid(splat.opacityLogits[i]!),
      angle,
    });
  }
  return sprites;
}

// ---------------------------------------------------------------------------
// Renderer sink: what the generation flow draws into
// ---------------------------------------------------------------------------

export interface StateRender {
  step: number;
  sprites: Sprite[];
}

export interface RendererSink {
  renderVoxelState(step: number, grid: GridJson): void;
  renderFinalSplat(splat: ParsedSplat, colorGain?: number[]): void;
  clear(): void;
}

/** Records draw lists in order; doubles as the test-visible render target. */
export class DrawListRenderer implements RendererSink {
  camera: CameraState;
  stateRenders: StateRender[] = [];
  finalSprites: Sprite[] | null = null;

  constructor(camera?: CameraState) {
    this.camera = camera ?? createCamera();
  }

  renderVoxelState(step: number, grid: GridJson): void {
    this.stateRenders.push({ step, sprites: voxelSprites(grid, this.camera) });
  }

  renderFinalSplat(splat: ParsedSplat, colorGain?: number[]): void {
    this.finalSprites = splatSprites(splat, this.camera, colorGain);
  }

  clear(): void {
    this.stateRenders = [];
    this.finalSprites = null;
  }
}

// ---------------------------------------------------------------------------
// Picking: ray-grid traversal, no server round trip
// ---------------------------------------------------------------------------

export interface Ray {
  origin: Vec3;
  dir: Vec3;
}

/** Ray through a pixel given in NDC ([-1,1] both axes, +y up). */
export function rayForPixel(cam: CameraState, ndcX: number, ndcY: number): Ray {
  const { right, trueUp, forward } = cameraBasis(cam);
  const tanHalf = Math.tan(cam.fovY / 2);
  const dir = normalize(
    add(
      forward,
      add(
        scale(right, ndcX * tanHalf * cam.aspect),
        scale(trueUp, ndcY * tanHalf),
      ),
    ),
  );
  return { origin: cam.position, dir };
}

export interface PickResult {
  /** First occupied cell the ray enters. */
  cell: [number, number, number];
  /** Cell just before entry (empty neighbor), for placing with the add tool. */
  prev: [number, number, number] | null;
}

/**
 * Amanatides-Woo voxel traversal from the ray's entry into the grid AABB,
 * returning the first occupied cell. Runs entirely client-side so clicks
 * never need a server round trip.
 */
export function pickCell(grid: ClientGrid, ray: Ray): PickResult | null {
  const lo = grid.bounds[0];
  const hi = grid.bounds[1];
  const res = grid.resolution;
  const cellSize = gridCellSize(res, [lo, hi]);

  // Slab test for the grid AABB.
  let tEnter = 0;
  let tExit = Infinity;
  for (let axis = 0; axis < 3; axis++) {
    const o = ray.origin[axis]!;
    const d = ray.dir[axis]!;
    if (Math.abs(d) < 1e-15) {
      if (o < lo[axis]! || o > hi[axis]!) return null;
      continue;
    }
    let t0 = (lo[axis]! - o) / d;
    let t1 = (hi[axis]! - o) / d;
    if (t0 > t1) [t0, t1] = [t1, t0];
    tEnter = Math.max(tEnter, t0);
    tExit = Math.min(tExit, t1);
  }
  if (tEnter > tExit) return null;

  // Nudge inside the box to land in a well-defined starting cell.
  const eps = 1e-9 * Math.max(1, Math.abs(tEnter));
  const start = add(ray.origin, scale(ray.dir, tEnter + eps));
  const cell: [number, number, number] = [0, 0, 0];
  for (let axis = 0; axis < 3; axis++) {
    const idx = Math.floor((start[axis]! - lo[axis]!) / cellSize[axis]!);
    cell[axis] = Math.min(Math.max(idx, 0), res - 1);
  }

  const step: [number, number, number] = [0, 0, 0];
  const tMax: [number, number, number] = [Infinity, Infinity, Infinity];
  const tDelta: [number, number, number] = [Infinity, Infinity, Infinity];
  for (const axis of [0, 1, 2] as const) {
    const d = ray.dir[axis];
    if (Math.abs(d) < 1e-15) continue;
    step[axis] = d > 0 ? 1 : -1;
    const nextBoundary =
      lo[axis]! + (cell[axis] + (d > 0 ? 1 : 0)) * cellSize[axis]!;
    tMax[axis] = (nextBoundary - ray.origin[axis]) / d;
    tDelta[axis] = Math.abs(cellSize[axis]! / d);
  }

  let prev: [number, number, number] | null = null;
  for (let guard = 0; guard < 3 * res + 3; guard++) {
    if (grid.cells.has(cellKey(cell))) {
      return { cell: [cell[0], cell[1], cell[2]], prev };
    }
    prev = [cell[0], cell[1], cell[2]];
    let axis: 0 | 1 | 2 = 0;
    if (tMax[1] < tMax[axis]) axis = 1;
    if (tMax[2] < tMax[axis]) axis = 2;
    cell[axis] += step[axis];
    if (cell[axis] < 0 || cell[axis] >= res) return null;
    tMax[axis] += tDelta[axis];
  }
  return null;
}

/** Occupied cells sorted far-to-near for painter's-order drawing. */
export function depthSortCells(grid: ClientGrid, cam: CameraState): [number, number, number][] {
  const cellSize = gridCellSize(grid.resolution, grid.bounds);
  const entries: { cell: [number, number, number]; depth: number }[] = [];
  for (const key of grid.cells.keys()) {
    const cell = keyCell(key);
    const center = cellCenter(grid.bounds[0], cellSize, cell as unknown as number[]);
    entries.push({
      cell: [cell[0], cell[1], cell[2]],
      depth: projectPoint(cam, center).depth,
    });
  }
  entries.sort((a, b) => b.depth - a.depth);
  return entries.map((e) => e.cell);
}

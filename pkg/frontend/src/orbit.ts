// Orbit camera: (azimuth, elevation, radius, target) -> camera-to-world pose.
// Convention matches the render service: right-handed, camera looks down -z,
// image y points down, up is world +z.

export interface OrbitState {
  azimuthDeg: number;
  elevationDeg: number;
  radius: number;
  target: [number, number, number];
}

export type Vec3 = [number, number, number];

const DEG = Math.PI / 180;

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function norm(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

function normalize(a: Vec3): Vec3 {
  const n = norm(a);
  if (n < 1e-12) throw new Error('cannot normalize zero vector');
  return [a[0] / n, a[1] / n, a[2] / n];
}

export function clampRadius(radius: number, min: number, max: number): number {
  return Math.min(Math.max(radius, min), max);
}

export function clampElevation(elevationDeg: number): number {
  // keep away from the poles where the up vector degenerates
  return Math.min(Math.max(elevationDeg, 2), 88);
}

export function cameraPosition(state: OrbitState): Vec3 {
  const az = state.azimuthDeg * DEG;
  const el = state.elevationDeg * DEG;
  const r = state.radius;
  return [
    state.target[0] + r * Math.cos(el) * Math.cos(az),
    state.target[1] + r * Math.cos(el) * Math.sin(az),
    state.target[2] + r * Math.sin(el),
  ];
}

/** Row-major 4x4 camera-to-world matrix for an orbit state. */
export function orbitPose(state: OrbitState): number[] {
  const pos = cameraPosition(state);
  const forward = normalize(sub(state.target, pos));
  const up: Vec3 = [0, 0, 1];
  const xCam = normalize(cross(up, forward));
  const zCam: Vec3 = [-forward[0], -forward[1], -forward[2]];
  const yCam = cross(zCam, xCam);
  const m = new Array<number>(16).fill(0);
  for (let i = 0; i < 3; i++) {
    m[i * 4 + 0] = xCam[i];
    m[i * 4 + 1] = yCam[i];
    m[i * 4 + 2] = zCam[i];
    m[i * 4 + 3] = pos[i];
  }
  m[15] = 1;
  return m;
}

/** Max |R^T R - I| entry of the rotation block of a row-major pose. */
export function orthonormalityError(pose: number[]): number {
  let worst = 0;
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      let dot = 0;
      for (let k = 0; k < 3; k++) dot += pose[k * 4 + i] * pose[k * 4 + j];
      worst = Math.max(worst, Math.abs(dot - (i === j ? 1 : 0)));
    }
  }
  return worst;
}

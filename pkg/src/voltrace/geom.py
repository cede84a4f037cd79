"""Geometry and sampling primitives: vectors, rays, rigid transforms,
axis-aligned boxes, stratified/sphere sampling, and a deterministic
counter-based RNG.

Conventions used across the package:
  * positions are float64 arrays of shape (3,) in scene units
  * directions are unit-length (enforced to 1e-6 at construction)
  * batched variants take (N, 3) arrays and are the preferred path in
    inner loops; scalar entry points wrap them
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

__all__ = [
    "Aabb",
    "Ray",
    "RigidTransform",
    "Rng",
    "fibonacci_sphere_dirs",
    "key_uniforms",
    "mix64",
    "mix_key",
    "normalize",
    "ray_box_intersect",
    "ray_box_intersect_batch",
    "rotation_about_axis",
    "rotation_from_rotvec_deg",
    "sphere_dirs_from_keys",
    "stratified_samples",
    "stratified_samples_from_keys",
    "token",
    "uniform_sphere_dirs",
    "vec3",
]

UNIT_TOLERANCE = 1e-6

_U64 = np.uint64
_MASK64 = 0xFFFFFFFFFFFFFFFF
# SplitMix64 constants (Steele, Lea, Flood 2014).
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX_A = _U64(0xBF58476D1CE4E5B9)
_MIX_B = _U64(0x94D049BB133111EB)


def vec3(x: float, y: float, z: float) -> np.ndarray:
    return np.array([x, y, z], dtype=np.float64)


def normalize(v) -> np.ndarray:
    """Return v scaled to unit length; raises on zero-length input."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize zero or non-finite vector")
    return v / n


# ---------------------------------------------------------------------------
# Counter-based RNG
#
# Draw j of stream k is mix64(k + (j+1)*GOLDEN): a pure function of
# (key, counter), so identical seeds give identical streams regardless of
# evaluation schedule, and per-pixel/per-sample streams are derived by key
# mixing instead of sequential state.
# ---------------------------------------------------------------------------


def mix64(z) -> np.ndarray:
    """SplitMix64 finalizer on uint64 scalars or arrays (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _MIX_A
        z = (z ^ (z >> _U64(27))) * _MIX_B
        return z ^ (z >> _U64(31))


def token(value) -> np.ndarray:
    """Map an int or float (scalar or array) to uint64 tokens for key mixing."""
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        return arr.astype(np.float64).view(np.uint64)
    if arr.dtype.kind in "iu":
        return (arr.astype(np.int64) & np.int64(-1)).view(np.uint64)
    raise TypeError(f"cannot tokenize dtype {arr.dtype}")


def mix_key(key, *tokens) -> np.ndarray:
    """Derive a child key from a parent key and tokens (order-sensitive)."""
    k = np.asarray(key, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for t in tokens:
            k = mix64(k ^ mix64(token(t) + _GOLDEN))
    return k


def key_uniforms(keys, n: int, base: int = 0) -> np.ndarray:
    """n uniforms in [0, 1) per key; keys of shape S give output S + (n,).

    Draw j of a key uses counter base + j, so disjoint counter windows give
    disjoint draws from the same stream.
    """
    k = np.asarray(keys, dtype=np.uint64)[..., None]
    ctr = np.arange(1 + base, 1 + base + n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = mix64(k + ctr * _GOLDEN)
    # 53 high bits -> double in [0, 1)
    return (bits >> _U64(11)).astype(np.float64) * (2.0**-53)


class Rng:
    """Deterministic counter-based generator.

    Same seed => bitwise-identical stream. derive(*tokens) returns an
    independent child stream; it does not advance this stream's counter.
    """

    __slots__ = ("_key", "_counter")

    def __init__(self, seed: int):
        self._key = mix64(_U64(int(seed) & _MASK64))
        self._counter = 0

    @classmethod
    def _from_key(cls, key) -> "Rng":
        rng = cls.__new__(cls)
        rng._key = np.uint64(key)
        rng._counter = 0
        return rng

    @property
    def key(self) -> np.uint64:
        return self._key

    def derive(self, *tokens) -> "Rng":
        return Rng._from_key(mix_key(self._key, *tokens))

    def derive_keys(self, values) -> np.ndarray:
        """Vectorized derive: one child key per element of values."""
        return mix_key(self._key, values)

    def uniforms(self, n: int) -> np.ndarray:
        out = key_uniforms(self._key, n, base=self._counter)
        self._counter += n
        return out

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def integers(self, upper: int, n: int) -> np.ndarray:
        """n integers uniform in [0, upper)."""
        if upper <= 0:
            raise ValueError("upper must be positive")
        return np.minimum((self.uniforms(n) * upper).astype(np.int64), upper - 1)


# ---------------------------------------------------------------------------
# Rotations and rigid transforms
# ---------------------------------------------------------------------------


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    """Rotation matrix about an arbitrary axis (Rodrigues form)."""
    u = normalize(axis)
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    ux, uy, uz = u
    cross = np.array([[0.0, -uz, uy], [uz, 0.0, -ux], [-uy, ux, 0.0]])
    return c * np.eye(3) + s * cross + (1.0 - c) * np.outer(u, u)


def rotation_from_rotvec_deg(rotvec) -> np.ndarray:
    """Rotation from an axis-angle vector whose norm is the angle in degrees."""
    v = np.asarray(rotvec, dtype=np.float64)
    angle = float(np.linalg.norm(v))
    if angle == 0.0:
        return np.eye(3)
    return rotation_about_axis(v / angle, np.deg2rad(angle))


@dataclass(frozen=True)
class Ray:
    """Origin plus unit direction; direction is normalized at construction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", normalize(self.direction))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation + uniform scale; world = scale * R @ local + t."""

    rotation: np.ndarray
    translation: np.ndarray
    uniform_scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or tr.shape != (3,):
            raise ValueError("rotation must be (3,3) and translation (3,)")
        if not np.allclose(r.T @ r, np.eye(3), atol=UNIT_TOLERANCE):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0.0:
            raise ValueError("rotation must be proper (det +1), not a reflection")
        if not (self.uniform_scale > 0.0):
            raise ValueError("uniform_scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", tr)
        object.__setattr__(self, "uniform_scale", float(self.uniform_scale))
        # skipping the matmul for exact-identity rotations is bitwise safe
        object.__setattr__(self, "_plain_rotation", bool(np.all(r == np.eye(3))))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def inverse(self) -> "RigidTransform":
        inv_r = self.rotation.T
        s = 1.0 / self.uniform_scale
        return RigidTransform(inv_r, -s * (inv_r @ self.translation), s)

    # points ------------------------------------------------------------
    def point_to_world(self, p) -> np.ndarray:
        return self.uniform_scale * (self.rotation @ np.asarray(p, dtype=np.float64)) + self.translation

    def point_to_local(self, p) -> np.ndarray:
        return (self.rotation.T @ (np.asarray(p, dtype=np.float64) - self.translation)) / self.uniform_scale

    def points_to_world(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        rotated = pts if self._plain_rotation else pts @ self.rotation.T
        return self.uniform_scale * rotated + self.translation

    def points_to_local(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        shifted = pts - self.translation
        if not self._plain_rotation:
            shifted = shifted @ self.rotation
        return shifted if self.uniform_scale == 1.0 else shifted / self.uniform_scale

    # directions: rotation only, no translation or scale -----------------
    def dir_to_world(self, d) -> np.ndarray:
        return self.rotation @ np.asarray(d, dtype=np.float64)

    def dir_to_local(self, d) -> np.ndarray:
        return self.rotation.T @ np.asarray(d, dtype=np.float64)

    def dirs_to_world(self, dirs) -> np.ndarray:
        dirs = np.asarray(dirs, dtype=np.float64)
        return dirs if self._plain_rotation else dirs @ self.rotation.T

    def dirs_to_local(self, dirs) -> np.ndarray:
        dirs = np.asarray(dirs, dtype=np.float64)
        return dirs if self._plain_rotation else dirs @ self.rotation

    # rays ----------------------------------------------------------------
    def ray_to_local(self, ray: Ray) -> Ray:
        """Ray in the local frame. NOTE: local parameter t_local = t_world / uniform_scale."""
        return Ray(self.point_to_local(ray.origin), self.dir_to_local(ray.direction))

    def ray_to_world(self, ray: Ray) -> Ray:
        return Ray(self.point_to_world(ray.origin), self.dir_to_world(ray.direction))


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box, min corner <= max corner componentwise."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64)
        hi = np.asarray(self.max_corner, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("corners must be 3-vectors")
        if np.any(lo > hi):
            raise ValueError("min corner exceeds max corner")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @classmethod
    def centered(cls, half_extents) -> "Aabb":
        h = np.abs(np.asarray(half_extents, dtype=np.float64))
        return cls(-h, h)

    def corners(self) -> np.ndarray:
        lo, hi = self.min_corner, self.max_corner
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return np.all((pts >= self.min_corner) & (pts <= self.max_corner), axis=-1)

    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max_corner - self.min_corner))


def ray_box_intersect_batch(origins, dirs, box: Aabb):
    """Slab test for many rays against one box.

    Returns (hit, t_near, t_far). Rays whose exit is behind the origin do
    not hit; t_near is clamped to 0 for origins inside the box. Zero
    direction components are handled explicitly (no 0 * inf NaNs).
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    # zero direction components divide to +-inf; the 0 * inf NaN appears only
    # when the origin sits exactly on that slab face, and fmin/fmax keep the
    # remaining infinite endpoint, so such rays count as misses (the grazing
    # set has zero measure)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (box.min_corner - o) * inv
        tb = (box.max_corner - o) * inv
    t0 = np.fmax.reduce(np.fmin(ta, tb), axis=-1)
    t1 = np.fmin.reduce(np.fmax(ta, tb), axis=-1)
    hit = (t0 < t1) & (t1 > 0.0) & np.isfinite(t1)
    t0 = np.where(hit, np.maximum(t0, 0.0), 0.0)
    t1 = np.where(hit, t1, 0.0)
    return hit, t0, t1


def ray_box_intersect(ray: Ray, box: Aabb) -> Optional[Tuple[float, float]]:
    """(t_near, t_far) of ray against box, or None on miss (t_far <= 0 is a miss)."""
    hit, t0, t1 = ray_box_intersect_batch(ray.origin[None, :], ray.direction[None, :], box)
    if not hit[0]:
        return None
    return float(t0[0]), float(t1[0])


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def stratified_samples_from_keys(keys, t_near, t_far, n: int, base: int = 0) -> np.ndarray:
    """One stratified draw per bin: sample k uniform in [t0 + k*w, t0 + (k+1)*w)."""
    t0 = np.asarray(t_near, dtype=np.float64)[..., None]
    t1 = np.asarray(t_far, dtype=np.float64)[..., None]
    u = key_uniforms(keys, n, base=base)
    width = (t1 - t0) / n
    return t0 + (np.arange(n) + u) * width


def stratified_samples(t_near: float, t_far: float, n: int, rng: Rng) -> np.ndarray:
    """n stratified samples over [t_near, t_far), strictly increasing."""
    if not (t_far > t_near):
        raise ValueError("t_far must exceed t_near")
    if n < 1:
        raise ValueError("need at least one sample")
    u = rng.uniforms(n)
    width = (t_far - t_near) / n
    return t_near + (np.arange(n) + u) * width


def sphere_dirs_from_keys(keys, k: int, base: int = 0) -> np.ndarray:
    """k uniform unit directions per key; keys of shape S give S + (k, 3)."""
    u = key_uniforms(keys, 2 * k, base=base)
    u1, u2 = u[..., :k], u[..., k:]
    z = 1.0 - 2.0 * u1
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * u2
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def uniform_sphere_dirs(k: int, rng: Rng) -> np.ndarray:
    """k directions uniform on the unit sphere, shape (k, 3)."""
    if k < 1:
        raise ValueError("need at least one direction")
    u = rng.uniforms(2 * k)
    z = 1.0 - 2.0 * u[:k]
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * u[k:]
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def fibonacci_sphere_dirs(k: int) -> np.ndarray:
    """Deterministic near-uniform sphere covering (Fibonacci lattice), shape (k, 3)."""
    i = np.arange(k, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / k
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)

"""Volumetric path tracing over composed scattering-field instances.

The Monte Carlo renderer marches every object a ray's box test admits,
merges the samples by distance, composites front to back, and shades each
contributing sample with direct light (optionally shadowed), an optional
environment term, and recursive indirect bounces along sampled sphere
directions.

All stochastic decisions are keyed by counter-based RNG streams derived
per pixel and per sample site, so results are independent of evaluation
schedule, chunking, thread count, and object ordering, and a fixed seed
reproduces images bitwise.

render_reference implements the same light transport with deterministic
dense midpoint quadrature and fixed Fibonacci direction sets; it shares
only the geometry and field primitives with the Monte Carlo path so the
two stay independent checks on each other.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from .fields import ObjectInstance
from .geom import (
    Ray,
    Rng,
    fibonacci_sphere_dirs,
    key_uniforms,
    mix_key,
    normalize,
    ray_box_intersect_batch,
    sphere_dirs_from_keys,
    stratified_samples_from_keys,
)

__all__ = [
    "Camera",
    "EnvironmentMap",
    "OracleSettings",
    "PointLight",
    "RaySampleSet",
    "RenderMode",
    "RenderSettings",
    "Scene",
    "camera_from_matrix",
    "direct_radiance",
    "environment_radiance",
    "indirect_radiance",
    "march_object",
    "rays_from_camera_matrix",
    "render_image",
    "render_ray",
    "render_reference",
    "shadow_transmittance",
]

MAX_RECURSION_DEPTH = 8

# Stream purposes; combined with per-ray keys so that enabling one term
# (e.g. indirect) never perturbs the draws of another.
_TAG_PIXEL = 11
_TAG_JITTER = 12
_TAG_MARCH = 13
_TAG_SHADOW = 14
_TAG_ENV = 15
_TAG_ENV_SHADOW = 16
_TAG_INDIRECT = 17
_TAG_SECONDARY = 18

# fixed work-unit sizes; chunking must never affect results, only memory
_PRIMARY_CHUNK = 4096
_SECONDARY_CHUNK = 8192
_SHADE_BLOCK = 65536
_MARCH_SAMPLE_BUDGET = 2_000_000
_ORACLE_KNOT_BLOCK = 1024
# smallest material-run span that earns an extra interpolation knot,
# as a fraction of the scene's bounding diagonal
_KNOT_SPACING_DENOM = 64.0


class RenderMode(str, Enum):
    DIRECT_ONLY = "direct_only"
    DIRECT_SHADOWS = "direct_shadows"
    INDIRECT_ONLY = "indirect_only"
    FULL = "full"


@dataclass(frozen=True)
class PointLight:
    position: np.ndarray
    radiance: np.ndarray
    inverse_square: bool = False  # off: the light delivers its radiance at any distance

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "radiance", np.asarray(self.radiance, dtype=np.float64).reshape(3))
        if np.any(self.radiance < 0.0) or not np.all(np.isfinite(self.radiance)):
            raise ValueError("light radiance must be finite and nonnegative")


class EnvironmentMap:
    """Equirectangular radiance grid: rows span theta in [0, pi] measured
    from +z (top row is +z), columns span phi = atan2(y, x) in [0, 2pi).

    Lookup is bilinear with endpoint conventions: row r sits at
    theta = r * pi / (rows - 1), column c at phi = c * 2pi / cols, so phi
    wraps around while theta clamps at the poles.
    """

    def __init__(self, grid, scale: float = 1.0):
        g = np.asarray(grid, dtype=np.float64)
        if g.ndim != 3 or g.shape[2] != 3 or g.shape[0] < 1 or g.shape[1] < 1:
            raise ValueError("environment grid must be (rows, cols, 3)")
        if not np.all(np.isfinite(g)) or np.any(g < 0.0):
            raise ValueError("environment radiance must be finite and nonnegative")
        if not (scale >= 0.0 and math.isfinite(scale)):
            raise ValueError("scale must be finite and nonnegative")
        self.grid = g
        self.scale = float(scale)

    def radiance_many(self, dirs) -> np.ndarray:
        d = np.asarray(dirs, dtype=np.float64)
        rows, cols = self.grid.shape[:2]
        theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
        phi = np.arctan2(d[..., 1], d[..., 0]) % (2.0 * np.pi)

        if rows == 1:
            r0 = r1 = np.zeros(theta.shape, dtype=np.intp)
            fr = np.zeros_like(theta)
        else:
            u = theta / np.pi * (rows - 1)
            r0 = np.clip(np.floor(u).astype(np.intp), 0, rows - 1)
            r1 = np.minimum(r0 + 1, rows - 1)
            fr = u - r0

        v = phi / (2.0 * np.pi) * cols
        c0 = np.floor(v).astype(np.intp) % cols
        c1 = (c0 + 1) % cols
        fc = v - np.floor(v)

        fr = fr[..., None]
        fc = fc[..., None]
        top = self.grid[r0, c0] * (1.0 - fc) + self.grid[r0, c1] * fc
        bot = self.grid[r1, c0] * (1.0 - fc) + self.grid[r1, c1] * fc
        return self.scale * (top * (1.0 - fr) + bot * fr)

    def radiance(self, direction) -> np.ndarray:
        return self.radiance_many(np.asarray(direction, dtype=np.float64)[None, :])[0]


def environment_radiance(env: EnvironmentMap, direction) -> np.ndarray:
    """Radiance arriving from a direction at infinity."""
    return env.radiance(direction)


@dataclass(frozen=True)
class Scene:
    objects: Tuple[ObjectInstance, ...]
    lights: Tuple[PointLight, ...] = ()
    environment: Optional[EnvironmentMap] = None

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "lights", tuple(self.lights))


@dataclass(frozen=True)
class RenderSettings:
    samples_per_object: int = 192
    shadow_samples: Optional[int] = None  # defaults to samples_per_object
    indirect_dirs: int = 20
    max_bounces: int = 2
    mode: RenderMode = RenderMode.FULL
    shadow_epsilon: float = 1e-3
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    pixel_samples: int = 1

    def __post_init__(self):
        if self.samples_per_object < 1 or self.indirect_dirs < 1 or self.pixel_samples < 1:
            raise ValueError("sample counts must be at least 1")
        if self.shadow_samples is not None and self.shadow_samples < 1:
            raise ValueError("shadow_samples must be at least 1")
        if not (1 <= self.max_bounces <= MAX_RECURSION_DEPTH):
            raise ValueError(f"max_bounces must be in [1, {MAX_RECURSION_DEPTH}]")
        if not (self.shadow_epsilon > 0.0):
            raise ValueError("shadow_epsilon must be positive")
        object.__setattr__(self, "mode", RenderMode(self.mode))

    @property
    def effective_shadow_samples(self) -> int:
        return self.samples_per_object if self.shadow_samples is None else self.shadow_samples


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; pixel (0, 0) is the top-left of the image."""

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov_deg: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "look_at", np.asarray(self.look_at, dtype=np.float64).reshape(3))
        object.__setattr__(self, "up", np.asarray(self.up, dtype=np.float64).reshape(3))
        if not (0.0 < self.vertical_fov_deg < 180.0):
            raise ValueError("vertical_fov_deg must be in (0, 180)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        forward = normalize(self.look_at - self.position)
        right_raw = np.cross(forward, self.up)
        if np.linalg.norm(right_raw) < 1e-9:
            raise ValueError("camera up direction is parallel to the view direction")
        right = normalize(right_raw)
        object.__setattr__(self, "_basis", (forward, right, np.cross(right, forward)))

    @property
    def basis(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(forward, right, up) orthonormal frame."""
        return self._basis

    def _tan_half(self) -> float:
        return math.tan(math.radians(self.vertical_fov_deg) / 2.0)

    def dirs_for_pixels(self, ix, iy, jx=0.5, jy=0.5) -> np.ndarray:
        """Unit ray directions through pixel (ix + jx, iy + jy)."""
        forward, right, up = self._basis
        tan_half = self._tan_half()
        aspect = self.width / self.height
        ndc_x = ((np.asarray(ix, dtype=np.float64) + jx) / self.width) * 2.0 - 1.0
        ndc_y = 1.0 - ((np.asarray(iy, dtype=np.float64) + jy) / self.height) * 2.0
        d = (
            forward
            + ndc_x[..., None] * (tan_half * aspect) * right
            + ndc_y[..., None] * tan_half * up
        )
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def ray_for_pixel(self, ix: int, iy: int) -> Ray:
        return Ray(self.position, self.dirs_for_pixels(np.array([ix]), np.array([iy]))[0])

    def project(self, point) -> Optional[Tuple[float, float]]:
        """Pixel coordinates of a world point, or None when behind the camera."""
        forward, right, up = self._basis
        rel = np.asarray(point, dtype=np.float64) - self.position
        depth = float(rel @ forward)
        if depth <= 0.0:
            return None
        tan_half = self._tan_half()
        aspect = self.width / self.height
        ndc_x = float(rel @ right) / (depth * tan_half * aspect)
        ndc_y = float(rel @ up) / (depth * tan_half)
        return ((ndc_x + 1.0) * 0.5 * self.width - 0.5, (1.0 - ndc_y) * 0.5 * self.height - 0.5)

    def camera_to_world(self) -> np.ndarray:
        """Row-major 4x4 whose columns are right, up, forward, position."""
        forward, right, up = self._basis
        m = np.eye(4)
        m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, up, forward, self.position
        return m


def camera_from_matrix(c2w, vertical_fov_deg: float, width: int, height: int) -> Camera:
    """Camera whose frame matches a stored camera_to_world matrix."""
    m = np.asarray(c2w, dtype=np.float64)
    pos, forward, up = m[:3, 3], m[:3, 2], m[:3, 1]
    return Camera(
        position=pos,
        look_at=pos + forward,
        up=up,
        vertical_fov_deg=vertical_fov_deg,
        width=width,
        height=height,
    )


def rays_from_camera_matrix(c2w, vertical_fov_deg: float, width: int, height: int):
    """Pixel-center ray origins and directions from a camera_to_world
    matrix laid out like Camera.camera_to_world(). Returns two (H*W, 3)
    arrays in row-major pixel order."""
    m = np.asarray(c2w, dtype=np.float64)
    right, up, forward, pos = m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3]
    tan_half = math.tan(math.radians(vertical_fov_deg) / 2.0)
    aspect = width / height
    ix, iy = np.meshgrid(np.arange(width), np.arange(height))
    ndc_x = ((ix + 0.5) / width) * 2.0 - 1.0
    ndc_y = 1.0 - ((iy + 0.5) / height) * 2.0
    d = (
        forward
        + ndc_x[..., None] * (tan_half * aspect) * right
        + ndc_y[..., None] * tan_half * up
    )
    d = (d / np.linalg.norm(d, axis=-1, keepdims=True)).reshape(-1, 3)
    return np.broadcast_to(pos, d.shape).copy(), d


# ---------------------------------------------------------------------------
# Sample sets and the scalar marching API
# ---------------------------------------------------------------------------


@dataclass
class RaySampleSet:
    """Samples along one ray: distances, world positions, densities,
    opacities, and the owning object of each sample."""

    t: np.ndarray
    positions: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray
    object_index: np.ndarray

    @classmethod
    def merge(cls, sets: Sequence["RaySampleSet"]) -> "RaySampleSet":
        """Concatenate and sort by distance."""
        if not sets:
            return cls(
                np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int32)
            )
        t = np.concatenate([s.t for s in sets])
        order = np.argsort(t, kind="stable")
        return cls(
            t[order],
            np.concatenate([s.positions for s in sets])[order],
            np.concatenate([s.sigma for s in sets])[order],
            np.concatenate([s.alpha for s in sets])[order],
            np.concatenate([s.object_index for s in sets])[order],
        )

    def compositing_weights(self) -> np.ndarray:
        """alpha_m * prod_{n<m}(1 - alpha_n) in stored order."""
        trans = np.cumprod(1.0 - self.alpha)
        return self.alpha * np.concatenate([[1.0], trans[:-1]])

    def transmittance(self) -> float:
        return float(np.prod(1.0 - self.alpha))


def _forward_gaps(ts: np.ndarray, t_far) -> np.ndarray:
    """Per-sample interval: gap to the next sample; the last sample covers
    the remainder of the segment up to t_far."""
    last = np.asarray(t_far, dtype=np.float64)[..., None] - ts[..., -1:]
    if ts.shape[-1] == 1:
        return last
    return np.concatenate([np.diff(ts, axis=-1), last], axis=-1)


def march_object(
    obj: ObjectInstance,
    ray: Ray,
    t_bounds: Tuple[float, float],
    m: int,
    rng: Rng,
    object_index: int = 0,
) -> RaySampleSet:
    """m stratified samples of one object along [t_near, t_far).

    alpha_i = 1 - exp(-sigma_i * dt_i) with dt_i the forward gap between
    consecutive samples; the last sample covers the remainder up to t_far.
    Zero-density samples are kept with alpha = 0.
    """
    t_near, t_far = float(t_bounds[0]), float(t_bounds[1])
    if not (t_far > t_near):
        raise ValueError("t_far must exceed t_near")
    u = rng.uniforms(m)
    width = (t_far - t_near) / m
    ts = t_near + (np.arange(m) + u) * width
    positions = ray.origin + ts[:, None] * ray.direction
    sigma = obj.density_world(positions)
    alpha = 1.0 - np.exp(-sigma * _forward_gaps(ts[None, :], t_far)[0])
    return RaySampleSet(ts, positions, sigma, alpha, np.full(m, object_index, dtype=np.int32))


# ---------------------------------------------------------------------------
# Vectorized Monte Carlo engine
# ---------------------------------------------------------------------------


def _mode_flags(mode: RenderMode, depth: int) -> Tuple[bool, bool, bool]:
    """(direct_on, shadows_on, indirect_allowed) for a bounce depth.

    Secondary bounces always carry full transport; a mode selects what the
    camera ray shades, not what light exists in the scene. direct_only and
    direct_shadows never spawn secondaries in the first place."""
    if depth > 0:
        return True, True, True
    direct_on = mode != RenderMode.INDIRECT_ONLY
    shadows_on = mode in (RenderMode.DIRECT_SHADOWS, RenderMode.FULL)
    indirect_allowed = mode in (RenderMode.INDIRECT_ONLY, RenderMode.FULL)
    return direct_on, shadows_on, indirect_allowed


def _march_alphas(obj, origins, dirs, seg_keys, t0, t1, m):
    """Stratified march of one object over per-ray segments -> (ts, alpha)."""
    ts = stratified_samples_from_keys(seg_keys, t0, t1, m)
    pos = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    sigma = obj.density_world(pos.reshape(-1, 3)).reshape(ts.shape)
    alpha = 1.0 - np.exp(-sigma * _forward_gaps(ts, t1))
    return ts, alpha


def _shadow_tau_batch(scene, origins, dirs, max_dist, exclude, keys, settings) -> np.ndarray:
    """Transmittance from each origin along its direction: the product of
    (1 - alpha) over stratified marches of every other intersected object,
    truncated at max_dist (the light distance). Per-occluder partial
    products fold in entry-distance order, keeping the value invariant to
    the scene's object ordering."""
    n = len(origins)
    m = settings.effective_shadow_samples
    n_obj = len(scene.objects)
    if n_obj == 0 or n == 0:
        return np.ones(n)
    partials = np.ones((n, n_obj))
    entry = np.full((n, n_obj), np.inf)
    row_budget = max(1, _MARCH_SAMPLE_BUDGET // m)
    for j, obj in enumerate(scene.objects):
        hit, t0, t1 = obj.intersect_batch(origins, dirs)
        active = hit & (exclude != j)
        t1c = np.minimum(t1, max_dist)
        active &= t1c > t0
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            continue
        for lo in range(0, idx.size, row_budget):
            sub = idx[lo : lo + row_budget]
            seg_keys = mix_key(keys[sub], t0[sub], t1c[sub])
            _, alpha = _march_alphas(obj, origins[sub], dirs[sub], seg_keys, t0[sub], t1c[sub], m)
            partials[sub, j] = np.prod(1.0 - alpha, axis=1)
        entry[idx, j] = t0[idx]
    if n_obj == 1:
        return partials[:, 0]
    order = np.argsort(entry, axis=1, kind="stable")
    ordered = np.take_along_axis(partials, order, axis=1)
    tau = np.ones(n)
    for j in range(n_obj):
        tau = tau * ordered[:, j]
    return tau


def _scatter_grouped(scene, obj_ids, positions, light_dirs, view_dirs) -> np.ndarray:
    out = np.zeros((len(positions), 3))
    for j, obj in enumerate(scene.objects):
        mask = obj_ids == j
        if mask.any():
            out[mask] = obj.scatter_world(positions[mask], light_dirs[mask], view_dirs[mask])
    return out


def _escape_radiance(scene, dirs, settings, depth) -> np.ndarray:
    """Radiance for path segments that leave the scene. Camera rays see the
    environment map (or the flat background color); deeper bounces see
    black, since environment light is already gathered as a direct term at
    every shading point."""
    if depth > 0:
        return np.zeros((len(dirs), 3))
    if scene.environment is not None:
        return scene.environment.radiance_many(dirs)
    return np.tile(np.asarray(settings.background, dtype=np.float64), (len(dirs), 1))


def _count_rays(stats, pixel_ids):
    if stats is not None and pixel_ids is not None and len(pixel_ids):
        np.add.at(stats, pixel_ids, 1)


def _shade_block(scene, settings, depth, x, view, obj_sel, skeys, slot, pix, stats):
    """Direct and indirect radiance for a block of contributing samples.
    Returns (direct+environment term, indirect term)."""
    n = len(x)
    direct_on, shadows_on, indirect_allowed = _mode_flags(settings.mode, depth)
    indirect_on = indirect_allowed and depth < settings.max_bounces - 1
    shade = np.zeros((n, 3))
    indirect = np.zeros((n, 3))
    eps = settings.shadow_epsilon

    if direct_on:
        for li, light in enumerate(scene.lights):
            delta = light.position - x
            dist = np.linalg.norm(delta, axis=1)
            ok = dist > eps
            if not ok.any():
                continue
            wl = np.where(ok[:, None], delta / np.where(ok, dist, 1.0)[:, None], 0.0)
            rho = _scatter_grouped(scene, obj_sel, x, wl, view)
            rad = np.broadcast_to(light.radiance, (n, 3)).copy()
            if light.inverse_square:
                rad = rad / np.maximum(dist, eps)[:, None] ** 2
            contrib = rho * rad
            if shadows_on:
                oki = np.nonzero(ok)[0]
                sh_keys = mix_key(skeys[oki], _TAG_SHADOW, slot[oki], li)
                tau = np.ones(n)
                tau[oki] = _shadow_tau_batch(
                    scene, x[oki] + eps * wl[oki], wl[oki], dist[oki] - eps,
                    obj_sel[oki], sh_keys, settings,
                )
                _count_rays(stats, pix[oki] if pix is not None else None)
                contrib = contrib * tau[:, None]
            shade += np.where(ok[:, None], contrib, 0.0)

        if scene.environment is not None:
            k = settings.indirect_dirs
            edirs = sphere_dirs_from_keys(mix_key(skeys, _TAG_ENV, slot), k)
            flat = edirs.reshape(-1, 3)
            rep = np.repeat(np.arange(n), k)
            rho_e = _scatter_grouped(scene, obj_sel[rep], x[rep], flat, view[rep])
            erad = scene.environment.radiance_many(flat)
            if shadows_on:
                esh = mix_key(
                    skeys[:, None], _TAG_ENV_SHADOW, slot[:, None], np.arange(k)[None, :]
                ).reshape(-1)
                tau_e = _shadow_tau_batch(
                    scene, x[rep] + eps * flat, flat, np.full(n * k, np.inf),
                    obj_sel[rep], esh, settings,
                )
                _count_rays(stats, pix[rep] if pix is not None else None)
                erad = erad * tau_e[:, None]
            shade += (rho_e * erad).reshape(n, k, 3).mean(axis=1)

    if indirect_on and (len(scene.lights) or scene.environment is not None):
        k = settings.indirect_dirs
        idirs = sphere_dirs_from_keys(mix_key(skeys, _TAG_INDIRECT, slot), k)
        flat = idirs.reshape(-1, 3)
        rep = np.repeat(np.arange(n), k)
        rho_i = _scatter_grouped(scene, obj_sel[rep], x[rep], flat, view[rep])
        sec_keys = mix_key(
            skeys[:, None], _TAG_SECONDARY, slot[:, None], np.arange(k)[None, :]
        ).reshape(-1)
        sec_pix = pix[rep] if pix is not None else None
        radiance = np.zeros((n * k, 3))
        for lo in range(0, n * k, _SECONDARY_CHUNK):
            hi = min(lo + _SECONDARY_CHUNK, n * k)
            radiance[lo:hi] = _trace(
                scene, x[rep[lo:hi]] + eps * flat[lo:hi], flat[lo:hi], sec_keys[lo:hi],
                settings, depth + 1,
                sec_pix[lo:hi] if sec_pix is not None else None, stats,
            )
        indirect = (rho_i * radiance).reshape(n, k, 3).mean(axis=1)

    return shade, indirect


def _trace(scene, origins, dirs, keys, settings, depth, pixel_ids=None, stats=None) -> np.ndarray:
    """Radiance for a batch of rays; keys are per-ray stream keys and
    pixel_ids (optional) index the stats array for ray counting."""
    n_rays = len(origins)
    color = np.zeros((n_rays, 3))
    if n_rays == 0 or depth >= MAX_RECURSION_DEPTH:
        return color
    _count_rays(stats, pixel_ids)

    n_obj = len(scene.objects)
    m = settings.samples_per_object

    hits = [obj.intersect_batch(origins, dirs) for obj in scene.objects]
    any_hit = (
        np.logical_or.reduce([h[0] for h in hits]) if n_obj else np.zeros(n_rays, dtype=bool)
    )
    if not any_hit.all():
        esc = ~any_hit
        color[esc] = _escape_radiance(scene, dirs[esc], settings, depth)
    active = np.nonzero(any_hit)[0]
    if active.size == 0:
        return color

    a_origins = origins[active]
    a_dirs = dirs[active]
    a_keys = keys[active]
    n_act = active.size

    # march every intersected object, then merge all samples by distance;
    # missing (ray, object) slots pad with t = inf, alpha = 0 and so drop
    # out of the compositing product exactly
    t_all = np.full((n_act, n_obj * m), np.inf)
    alpha_all = np.zeros((n_act, n_obj * m))
    for j, obj in enumerate(scene.objects):
        hit, t0, t1 = hits[j]
        idx = np.nonzero(hit[active])[0]
        if idx.size == 0:
            continue
        rows = active[idx]
        march_keys = mix_key(a_keys[idx], _TAG_MARCH, t0[rows], t1[rows])
        ts, alpha = _march_alphas(
            obj, a_origins[idx], a_dirs[idx], march_keys, t0[rows], t1[rows], m
        )
        t_all[idx, j * m : (j + 1) * m] = ts
        alpha_all[idx, j * m : (j + 1) * m] = alpha

    order = np.argsort(t_all, axis=1, kind="stable")
    t_sorted = np.take_along_axis(t_all, order, axis=1)
    a_sorted = np.take_along_axis(alpha_all, order, axis=1)
    o_sorted = (order // m).astype(np.int32)  # samples laid out object-major

    trans = np.cumprod(1.0 - a_sorted, axis=1)
    tau_excl = np.concatenate([np.ones((n_act, 1)), trans[:, :-1]], axis=1)
    weights = a_sorted * tau_excl
    tau_total = trans[:, -1]

    color[active] += tau_total[:, None] * _escape_radiance(scene, a_dirs, settings, depth)

    sel_ray, sel_slot = np.nonzero(weights > 0.0)
    if sel_ray.size == 0:
        return color

    w = weights[sel_ray, sel_slot]
    x = a_origins[sel_ray] + t_sorted[sel_ray, sel_slot, None] * a_dirs[sel_ray]
    obj_sel = o_sorted[sel_ray, sel_slot]
    view = a_dirs[sel_ray]
    skeys = a_keys[sel_ray]
    slot = sel_slot.astype(np.int64)
    pix = pixel_ids[active[sel_ray]] if pixel_ids is not None else None
    n_sel = sel_ray.size

    shade = np.zeros((n_sel, 3))
    indirect = np.zeros((n_sel, 3))
    for lo in range(0, n_sel, _SHADE_BLOCK):
        s = slice(lo, min(lo + _SHADE_BLOCK, n_sel))
        shade[s], indirect[s] = _shade_block(
            scene, settings, depth, x[s], view[s], obj_sel[s], skeys[s], slot[s],
            pix[s] if pix is not None else None, stats,
        )

    # direct and indirect accumulate as separate sums so that a full-mode
    # pixel equals its direct_shadows value plus a nonnegative indirect
    # term, channel for channel
    for arr in (w[:, None] * shade, w[:, None] * indirect):
        part = np.stack(
            [np.bincount(sel_ray, weights=arr[:, c], minlength=n_act) for c in range(3)],
            axis=1,
        )
        color[active] += part
    return color


# ---------------------------------------------------------------------------
# Scalar convenience API (thin wrappers over the batch engine)
# ---------------------------------------------------------------------------


def render_ray(
    scene: Scene, ray: Ray, settings: RenderSettings, rng: Rng, depth: int = 0
) -> np.ndarray:
    """Radiance arriving along one ray."""
    keys = np.array([rng.key], dtype=np.uint64)
    return _trace(scene, ray.origin[None, :], ray.direction[None, :], keys, settings, depth)[0]


def shadow_transmittance(
    scene: Scene,
    point,
    light_position,
    exclude_object: Optional[int],
    settings: RenderSettings,
    rng: Rng,
) -> float:
    """Transmittance between a point and a light through every other
    intersected object; samples beyond the light are discarded."""
    point = np.asarray(point, dtype=np.float64)
    light_position = np.asarray(light_position, dtype=np.float64)
    delta = light_position - point
    dist = float(np.linalg.norm(delta))
    if dist <= settings.shadow_epsilon:
        return 1.0
    wl = delta / dist
    excl = np.array([-1 if exclude_object is None else exclude_object])
    tau = _shadow_tau_batch(
        scene,
        (point + settings.shadow_epsilon * wl)[None, :],
        wl[None, :],
        np.array([dist - settings.shadow_epsilon]),
        excl,
        np.array([rng.key], dtype=np.uint64),
        settings,
    )
    return float(tau[0])


def direct_radiance(
    scene: Scene,
    position,
    object_index: int,
    view_dir,
    settings: RenderSettings,
    rng: Rng,
) -> np.ndarray:
    """Single-scatter radiance leaving a point toward the viewer: for each
    point light, rho(x, w_l, w_o) times the light radiance, attenuated by
    shadow transmittance when the mode has shadows; summed over lights,
    plus the sampled environment term when a map is present."""
    shade, _ = _shade_block(
        scene,
        settings,
        0,
        np.asarray(position, dtype=np.float64)[None, :],
        np.asarray(view_dir, dtype=np.float64)[None, :],
        np.array([object_index]),
        np.array([rng.key], dtype=np.uint64),
        np.zeros(1, dtype=np.int64),
        None,
        None,
    )
    return shade[0]


def indirect_radiance(
    scene: Scene,
    position,
    object_index: int,
    view_dir,
    settings: RenderSettings,
    rng: Rng,
    bounce_depth: int = 0,
    dirs_override: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Mean over K sampled sphere directions of incoming radiance times the
    scatter fraction toward the viewer. Black once the bounce budget is
    spent. dirs_override fixes the direction set (testing hook)."""
    if bounce_depth >= settings.max_bounces - 1 or bounce_depth + 1 >= MAX_RECURSION_DEPTH:
        return np.zeros(3)
    x = np.asarray(position, dtype=np.float64)
    view = np.asarray(view_dir, dtype=np.float64)
    if dirs_override is not None:
        dirs = np.asarray(dirs_override, dtype=np.float64).reshape(-1, 3)
    else:
        dirs = sphere_dirs_from_keys(
            np.array([mix_key(np.uint64(rng.key), _TAG_INDIRECT)]), settings.indirect_dirs
        )[0]
    k = len(dirs)
    rho = _scatter_grouped(
        scene, np.full(k, object_index), np.tile(x, (k, 1)), dirs, np.tile(view, (k, 1))
    )
    sec_keys = mix_key(np.full(k, rng.key, dtype=np.uint64), _TAG_SECONDARY, np.arange(k))
    radiance = _trace(
        scene, x + settings.shadow_epsilon * dirs, dirs, sec_keys, settings, bounce_depth + 1
    )
    return (rho * radiance).mean(axis=0)


# ---------------------------------------------------------------------------
# Image rendering
# ---------------------------------------------------------------------------


def render_image(
    scene: Scene,
    camera: Camera,
    settings: RenderSettings,
    seed: int = 0,
    threads: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """Render the camera view; returns (linear RGB image (H, W, 3),
    per-pixel traced-ray counts (H, W)).

    Each pixel sample derives its RNG stream from (seed, pixel index,
    sample index) and work splits into fixed-size chunks, so image bytes
    are identical for any thread count.
    """
    w, h = camera.width, camera.height
    n_pix = w * h
    root = Rng(seed)
    img = np.zeros((n_pix, 3))
    stats = np.zeros(n_pix, dtype=np.int64)

    ix = np.arange(n_pix, dtype=np.int64) % w
    iy = np.arange(n_pix, dtype=np.int64) // w

    tasks = []
    for s in range(settings.pixel_samples):
        keys_s = mix_key(np.full(n_pix, root.key, dtype=np.uint64), _TAG_PIXEL, np.arange(n_pix), s)
        if settings.pixel_samples > 1:
            jit = key_uniforms(mix_key(keys_s, _TAG_JITTER), 2)
            jx, jy = jit[:, 0], jit[:, 1]
        else:
            jx = jy = np.full(n_pix, 0.5)
        dirs = camera.dirs_for_pixels(ix, iy, jx, jy)
        for lo in range(0, n_pix, _PRIMARY_CHUNK):
            hi = min(lo + _PRIMARY_CHUNK, n_pix)
            tasks.append((lo, hi, keys_s[lo:hi], dirs[lo:hi]))

    def run(task):
        lo, hi, keys_chunk, dirs_chunk = task
        chunk_stats = np.zeros(hi - lo, dtype=np.int64)
        origins = np.broadcast_to(camera.position, (hi - lo, 3))
        c = _trace(
            scene, origins, dirs_chunk, keys_chunk, settings, 0,
            np.arange(hi - lo), chunk_stats,
        )
        return lo, hi, c, chunk_stats

    if threads <= 1:
        for lo, hi, c, cs in map(run, tasks):
            img[lo:hi] += c
            stats[lo:hi] += cs
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for lo, hi, c, cs in pool.map(run, tasks):
                img[lo:hi] += c
                stats[lo:hi] += cs

    img /= settings.pixel_samples
    return img.reshape(h, w, 3), stats.reshape(h, w)


# ---------------------------------------------------------------------------
# Deterministic reference renderer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleSettings:
    """Settings for the dense deterministic reference path.

    samples_per_object and indirect_dirs have hard floors: the reference
    exists to be trusted, not to be fast. Environment and indirect
    contributions vary smoothly in position, so they are evaluated at
    indirect_knots points per contiguous material run of each (ray, object)
    and linearly interpolated at the samples; point-light direct shading
    stays dense at every contributing sample because shadow edges are sharp.
    """

    samples_per_object: int = 4096
    indirect_dirs: int = 512
    secondary_samples: int = 256
    shadow_quadrature_samples: int = 1024
    indirect_knots: int = 4
    max_bounces: int = 2
    mode: RenderMode = RenderMode.FULL
    shadow_epsilon: float = 1e-3
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    MIN_SAMPLES = 4096
    MIN_DIRS = 512

    def __post_init__(self):
        if self.samples_per_object < self.MIN_SAMPLES:
            raise ValueError(f"reference renders use at least {self.MIN_SAMPLES} samples per object")
        if self.indirect_dirs < self.MIN_DIRS:
            raise ValueError(f"reference renders use at least {self.MIN_DIRS} sphere directions")
        if self.indirect_knots < 2 or self.secondary_samples < 16 or self.shadow_quadrature_samples < 16:
            raise ValueError("reference quadrature counts are too small")
        if not (1 <= self.max_bounces <= MAX_RECURSION_DEPTH):
            raise ValueError(f"max_bounces must be in [1, {MAX_RECURSION_DEPTH}]")
        object.__setattr__(self, "mode", RenderMode(self.mode))


def _oracle_optical_depth(obj, origins, dirs, t_begin, t_end, n_quad) -> np.ndarray:
    """Optical depth along segments: closed form when the field provides
    one, else midpoint quadrature."""
    depth = obj.optical_depth_world(origins, dirs, t_begin, t_end)
    if depth is not None:
        return depth
    t0 = np.asarray(t_begin, dtype=np.float64)[:, None]
    t1 = np.asarray(t_end, dtype=np.float64)[:, None]
    width = (t1 - t0) / n_quad
    ts = t0 + (np.arange(n_quad) + 0.5) * width
    pos = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    sigma = obj.density_world(pos.reshape(-1, 3)).reshape(ts.shape)
    return (sigma * width).sum(axis=1)


def _oracle_shadow_tau(scene, origins, dirs, max_dist, exclude, settings) -> np.ndarray:
    tau_depth = np.zeros(len(origins))
    for j, obj in enumerate(scene.objects):
        hit, t0, t1 = obj.intersect_batch(origins, dirs)
        active = hit & (exclude != j)
        t1c = np.minimum(t1, max_dist)
        active &= t1c > t0
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            continue
        tau_depth[idx] += _oracle_optical_depth(
            obj, origins[idx], dirs[idx], t0[idx], t1c[idx], settings.shadow_quadrature_samples
        )
    return np.exp(-tau_depth)


def _fast_shadow_tau(scene, origins, dirs, max_dist, exclude, settings) -> np.ndarray:
    """_oracle_shadow_tau with a single transform pass per object:
    closed-form fields integrate directly in their local frame."""
    tau_depth = np.zeros(len(origins))
    for j, obj in enumerate(scene.objects):
        tr = obj.transform
        local_o = tr.points_to_local(origins)
        local_d = tr.dirs_to_local(dirs)
        hit, t0, t1 = ray_box_intersect_batch(local_o, local_d, obj.canonical_bounds())
        s = tr.uniform_scale
        t0w = t0 * s
        t1c = np.minimum(t1 * s, max_dist)
        idx = np.nonzero(hit & (exclude != j) & (t1c > t0w))[0]
        if idx.size == 0:
            continue
        depth = obj.field.segment_optical_depth(
            local_o[idx], local_d[idx], t0w[idx] / s, t1c[idx] / s
        )
        if depth is None:
            depth = _oracle_optical_depth(
                obj, origins[idx], dirs[idx], t0w[idx], t1c[idx],
                settings.shadow_quadrature_samples,
            )
        tau_depth[idx] += depth
    return np.exp(-tau_depth)


def _oracle_direct(scene, x, obj_sel, view, settings, shadows_on, tau_fn=None) -> np.ndarray:
    n = len(x)
    shade = np.zeros((n, 3))
    eps = settings.shadow_epsilon
    shadow_tau = tau_fn or _oracle_shadow_tau
    for light in scene.lights:
        delta = light.position - x
        dist = np.linalg.norm(delta, axis=1)
        ok = dist > eps
        wl = np.where(ok[:, None], delta / np.where(ok, dist, 1.0)[:, None], 0.0)
        rho = _scatter_grouped(scene, obj_sel, x, wl, view)
        rad = np.broadcast_to(light.radiance, (n, 3)).copy()
        if light.inverse_square:
            rad = rad / np.maximum(dist, eps)[:, None] ** 2
        contrib = rho * rad
        if shadows_on:
            # zero scatter (unlit back sides) zeroes the contribution no
            # matter the transmittance, so only the remaining rows march
            live = np.nonzero(ok & (contrib != 0.0).any(axis=1))[0]
            if live.size:
                tau = shadow_tau(
                    scene, x[live] + eps * wl[live], wl[live], dist[live] - eps,
                    obj_sel[live], settings,
                )
                contrib[live] *= tau[:, None]
        shade += np.where(ok[:, None], contrib, 0.0)
    return shade


def _scene_diagonal(scene) -> float:
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for obj in scene.objects:
        b = obj.bounds_world()
        lo = np.minimum(lo, b.min_corner)
        hi = np.maximum(hi, b.max_corner)
    if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
        return 1.0
    return float(np.linalg.norm(hi - lo))


def _segment_prefix_depth(ray_ids, depths):
    """Optical depth accumulated before each entry within its own ray;
    entries must be grouped by ray in traversal order."""
    csum = np.cumsum(depths)
    prev = csum - depths
    first = np.ones(len(ray_ids), dtype=bool)
    first[1:] = ray_ids[1:] != ray_ids[:-1]
    rid = np.cumsum(first) - 1
    return prev - prev[np.nonzero(first)[0]][rid]


def _oracle_secondary(scene, origins, dirs, settings) -> np.ndarray:
    """Direct-plus-shadow shading of bounce rays, which never see the
    background and never scatter again.

    Fields that expose piecewise-constant material runs integrate in closed
    form: each run is cut into spans short enough that direct light is
    near-constant across them, weighted by the exact in-span scatter
    integral, shaded once at the span midpoint, and attenuated by the other
    objects' optical depth up to that point. Fields without runs fall back
    to midpoint ladders over their support window."""
    n = len(origins)
    color = np.zeros((n, 3))
    n_obj = len(scene.objects)
    if n == 0 or n_obj == 0:
        return color

    locals_o, locals_d = [], []
    ray_has = np.zeros((n_obj, n), dtype=bool)
    parts = []  # per object: (rays, lo, hi, sigma, depth before) in world units
    for j, obj in enumerate(scene.objects):
        tr = obj.transform
        lo_ = tr.points_to_local(origins)
        ld = tr.dirs_to_local(dirs)
        locals_o.append(lo_)
        locals_d.append(ld)
        s = tr.uniform_scale
        segs = obj.field.material_segments(lo_, ld)
        if segs is not None:
            starts, ends, dens = segs
            r, k = np.nonzero((ends > starts) & (dens > 0.0))
            if r.size == 0:
                continue
            od = dens[r, k] * (ends[r, k] - starts[r, k])  # scale cancels
            parts.append((j, r, starts[r, k] * s, ends[r, k] * s, dens[r, k] / s,
                          _segment_prefix_depth(r, od)))
            ray_has[j, r] = True
            continue
        hit, t0, t1 = ray_box_intersect_batch(lo_, ld, obj.canonical_bounds())
        win = obj.field.support_window(lo_, ld)
        if win is not None:
            whit, w0, w1 = win
            hit &= whit
            t0 = np.maximum(t0, w0)
            t1 = np.minimum(t1, w1)
        rows = np.nonzero(hit & (t1 > t0))[0]
        if rows.size == 0:
            continue
        m = settings.secondary_samples
        width = ((t1[rows] - t0[rows]) / m)[:, None]
        ts = t0[rows, None] + (np.arange(m) + 0.5) * width
        pos = lo_[rows, None, :] + ts[..., None] * ld[rows, None, :]
        sigma = obj.field.density_many(pos.reshape(-1, 3)).reshape(ts.shape)
        r, k = np.nonzero(sigma > 0.0)
        if r.size == 0:
            continue
        parts.append((j, rows[r], (ts[r, k] - 0.5 * width[r, 0]) * s,
                      (ts[r, k] + 0.5 * width[r, 0]) * s, sigma[r, k] / s,
                      _segment_prefix_depth(rows[r], sigma[r, k] * width[r, 0])))
        ray_has[j, rows[r]] = True
    if not parts:
        return color

    seg_obj = np.concatenate([np.full(len(p[1]), p[0], dtype=np.int64) for p in parts])
    seg_ray = np.concatenate([p[1] for p in parts])
    seg_lo = np.concatenate([p[2] for p in parts])
    seg_hi = np.concatenate([p[3] for p in parts])
    seg_sig = np.concatenate([p[4] for p in parts])
    seg_od0 = np.concatenate([p[5] for p in parts])

    # spans short enough that direct light is near-constant across them
    cap = max(_scene_diagonal(scene) / _KNOT_SPACING_DENOM, 1e-12)
    nsub = np.maximum(1, np.ceil((seg_hi - seg_lo) / cap)).astype(np.int64)
    bounds = np.concatenate([[0], np.cumsum(nsub)])
    pid = np.repeat(np.arange(len(nsub)), nsub)
    sub_i = np.arange(bounds[-1]) - bounds[pid]
    step = ((seg_hi - seg_lo) / nsub)[pid]
    lo = seg_lo[pid] + sub_i * step
    hi = np.where(sub_i == nsub[pid] - 1, seg_hi[pid], lo + step)
    sig = seg_sig[pid]
    od0 = seg_od0[pid] + sig * (lo - seg_lo[pid])
    w_own = np.exp(-od0) * -np.expm1(-sig * (hi - lo))
    keep = np.nonzero(w_own > 1e-9)[0]
    if keep.size == 0:
        return color
    c_ray = seg_ray[pid[keep]]
    c_obj = seg_obj[pid[keep]]
    c_mid = 0.5 * (lo[keep] + hi[keep])
    c_w = w_own[keep]

    # other objects' material between the ray origin and the shade point
    cross = np.zeros(keep.size)
    for j, obj in enumerate(scene.objects):
        rows = np.nonzero((c_obj != j) & ray_has[j, c_ray])[0]
        if rows.size == 0:
            continue
        r = c_ray[rows]
        t_loc = c_mid[rows] / obj.transform.uniform_scale
        dep = obj.field.segment_optical_depth(
            locals_o[j][r], locals_d[j][r], np.zeros(rows.size), t_loc
        )
        if dep is None:
            dep = _oracle_optical_depth(
                obj, origins[r], dirs[r], np.zeros(rows.size), c_mid[rows],
                settings.shadow_quadrature_samples,
            )
        cross[rows] += dep
    c_w = c_w * np.exp(-cross)

    x = origins[c_ray] + c_mid[:, None] * dirs[c_ray]
    shade = _oracle_direct(
        scene, x, c_obj, dirs[c_ray], settings, True, tau_fn=_fast_shadow_tau
    )
    for c in range(3):
        color[:, c] += np.bincount(c_ray, weights=c_w * shade[:, c], minlength=n)
    return color


def _oracle_trace(scene, origins, dirs, settings, depth) -> np.ndarray:
    """Deterministic counterpart of _trace: midpoint samples whose alpha
    covers their whole bin, fixed Fibonacci direction sets, no RNG."""
    n_rays = len(origins)
    color = np.zeros((n_rays, 3))
    if n_rays == 0 or depth >= MAX_RECURSION_DEPTH:
        return color
    if depth > 0 and scene.environment is None and depth >= settings.max_bounces - 1:
        # terminal bounces without environment light reduce to direct-plus-
        # shadow shading, which has a cheaper dedicated path
        return _oracle_secondary(scene, origins, dirs, settings)
    n_obj = len(scene.objects)
    m = settings.samples_per_object if depth == 0 else settings.secondary_samples
    direct_on, shadows_on, indirect_allowed = _mode_flags(settings.mode, depth)
    indirect_on = indirect_allowed and depth < settings.max_bounces - 1

    hits = [obj.intersect_batch(origins, dirs) for obj in scene.objects]
    any_hit = (
        np.logical_or.reduce([h[0] for h in hits]) if n_obj else np.zeros(n_rays, dtype=bool)
    )
    if not any_hit.all() and depth == 0:
        esc = ~any_hit
        if scene.environment is not None:
            color[esc] = scene.environment.radiance_many(dirs[esc])
        else:
            color[esc] = np.asarray(settings.background, dtype=np.float64)
    active = np.nonzero(any_hit)[0]
    if active.size == 0:
        return color
    a_origins, a_dirs = origins[active], dirs[active]
    n_act = active.size

    t_all = np.full((n_act, n_obj * m), np.inf)
    alpha_all = np.zeros((n_act, n_obj * m))
    seg_near = np.zeros((n_act, n_obj))
    seg_width = np.zeros((n_act, n_obj))
    for j, obj in enumerate(scene.objects):
        hit, t0, t1 = hits[j]
        idx = np.nonzero(hit[active])[0]
        if idx.size == 0:
            continue
        rows = active[idx]
        t0h, t1h = t0[rows], t1[rows]
        width = ((t1h - t0h) / m)[:, None]
        ts = t0h[:, None] + (np.arange(m) + 0.5) * width
        pos = a_origins[idx, None, :] + ts[..., None] * a_dirs[idx, None, :]
        sigma = obj.density_world(pos.reshape(-1, 3)).reshape(ts.shape)
        alpha = 1.0 - np.exp(-sigma * width)
        t_all[idx, j * m : (j + 1) * m] = ts
        alpha_all[idx, j * m : (j + 1) * m] = alpha
        seg_near[idx, j] = t0h
        seg_width[idx, j] = t1h - t0h

    order = np.argsort(t_all, axis=1, kind="stable")
    t_sorted = np.take_along_axis(t_all, order, axis=1)
    a_sorted = np.take_along_axis(alpha_all, order, axis=1)
    o_sorted = (order // m).astype(np.int32)  # samples laid out object-major
    trans = np.cumprod(1.0 - a_sorted, axis=1)
    tau_excl = np.concatenate([np.ones((n_act, 1)), trans[:, :-1]], axis=1)
    weights = a_sorted * tau_excl
    tau_total = trans[:, -1]

    if depth == 0:
        if scene.environment is not None:
            esc_rad = scene.environment.radiance_many(a_dirs)
        else:
            esc_rad = np.tile(np.asarray(settings.background, dtype=np.float64), (n_act, 1))
        color[active] += tau_total[:, None] * esc_rad

    sel_ray, sel_slot = np.nonzero(weights > 1e-9)
    if sel_ray.size == 0:
        return color
    w = weights[sel_ray, sel_slot]
    t_sel = t_sorted[sel_ray, sel_slot]
    obj_sel = o_sorted[sel_ray, sel_slot]
    x = a_origins[sel_ray] + t_sel[:, None] * a_dirs[sel_ray]
    view = a_dirs[sel_ray]
    shade = np.zeros((sel_ray.size, 3))

    if direct_on:
        shade += _oracle_direct(scene, x, obj_sel, view, settings, shadows_on)

    need_env = direct_on and scene.environment is not None
    if need_env or indirect_on:
        # Environment and indirect light vary smoothly in position, so
        # evaluate them at a few knots per contiguous material run of each
        # (ray, object) and linearly interpolate at the samples. Runs split
        # where consecutive samples are separated by several empty bins
        # (e.g. the two wall crossings of a hollow shell).
        kdirs = fibonacci_sphere_dirs(settings.indirect_dirs)
        n_dirs = settings.indirect_dirs
        nk = settings.indirect_knots
        n_sel = sel_ray.size
        reorder = np.lexsort((t_sel, obj_sel, sel_ray))
        r_ray = sel_ray[reorder]
        r_obj = obj_sel[reorder]
        r_t = t_sel[reorder]
        bin_w = seg_width[r_ray, r_obj] / m
        new_run = np.ones(n_sel, dtype=bool)
        new_run[1:] = (
            (r_ray[1:] != r_ray[:-1])
            | (r_obj[1:] != r_obj[:-1])
            | ((r_t[1:] - r_t[:-1]) > 4.0 * bin_w[1:])
        )
        run_id = np.cumsum(new_run) - 1
        first = np.nonzero(new_run)[0]
        last = np.append(first[1:] - 1, n_sel - 1)
        run_lo, run_hi = r_t[first], r_t[last]
        run_ray, run_obj = r_ray[first], r_obj[first]
        n_runs = len(first)

        # runs much shorter than the scene cannot carry more indirect
        # variation than their longer neighbours, so their knot count
        # shrinks with the span (thin shell walls keep 2 of the budget)
        spacing = max(_scene_diagonal(scene) / _KNOT_SPACING_DENOM, 1e-12)
        nk_run = np.minimum(nk, 2 + np.floor((run_hi - run_lo) / spacing).astype(np.int64))
        off = np.concatenate([[0], np.cumsum(nk_run)])
        n_knots = int(off[-1])
        rid = np.repeat(np.arange(n_runs), nk_run)
        frac = (np.arange(n_knots) - off[rid]) / np.maximum(nk_run[rid] - 1.0, 1.0)
        kt = run_lo[rid] + (run_hi - run_lo)[rid] * frac
        kx = a_origins[run_ray[rid]] + kt[:, None] * a_dirs[run_ray[rid]]
        kview = a_dirs[run_ray[rid]]
        kobj = run_obj[rid]
        vals = np.zeros((n_knots, 3))
        for kb in range(0, n_knots, _ORACLE_KNOT_BLOCK):
            ke = min(kb + _ORACLE_KNOT_BLOCK, n_knots)
            nb = ke - kb
            rep = np.repeat(np.arange(kb, ke), n_dirs)
            flat = np.tile(kdirs, (nb, 1))
            rho_k = _scatter_grouped(scene, kobj[rep], kx[rep], flat, kview[rep])
            incoming = np.zeros((nb * n_dirs, 3))
            if need_env:
                erad = scene.environment.radiance_many(flat)
                if shadows_on:
                    tau_e = _oracle_shadow_tau(
                        scene, kx[rep] + settings.shadow_epsilon * flat, flat,
                        np.full(nb * n_dirs, np.inf), kobj[rep], settings,
                    )
                    erad = erad * tau_e[:, None]
                incoming += erad
            if indirect_on:
                sec_o = kx[rep] + settings.shadow_epsilon * flat
                for lo in range(0, nb * n_dirs, _SECONDARY_CHUNK):
                    hi = min(lo + _SECONDARY_CHUNK, nb * n_dirs)
                    incoming[lo:hi] += _oracle_trace(
                        scene, sec_o[lo:hi], flat[lo:hi], settings, depth + 1
                    )
            vals[kb:ke] = (rho_k * incoming).reshape(nb, n_dirs, 3).mean(axis=1)

        span = np.where(run_hi > run_lo, run_hi - run_lo, 1.0)
        segs = nk_run[run_id] - 1
        u = (r_t - run_lo[run_id]) / span[run_id] * segs
        k0 = np.clip(np.floor(u).astype(np.int64), 0, segs)
        k1 = np.minimum(k0 + 1, segs)
        f = np.clip(u - k0, 0.0, 1.0)[:, None]
        smooth_sorted = vals[off[run_id] + k0] * (1.0 - f) + vals[off[run_id] + k1] * f
        smooth = np.zeros((n_sel, 3))
        smooth[reorder] = smooth_sorted
        shade += smooth

    contrib = np.stack(
        [np.bincount(sel_ray, weights=(w * shade[:, c]), minlength=n_act) for c in range(3)],
        axis=1,
    )
    color[active] += contrib
    return color


def render_reference(
    scene: Scene, camera: Camera, settings: Optional[OracleSettings] = None
) -> np.ndarray:
    """Deterministic dense-quadrature render of the same light transport;
    returns a linear RGB image of shape (height, width, 3)."""
    settings = settings or OracleSettings()
    w, h = camera.width, camera.height
    ix = np.arange(w * h) % w
    iy = np.arange(w * h) // w
    dirs = camera.dirs_for_pixels(ix, iy)
    origins = np.broadcast_to(camera.position, (w * h, 3))
    img = np.zeros((w * h, 3))
    chunk = max(1, _PRIMARY_CHUNK // 4)
    for lo in range(0, w * h, chunk):
        hi = min(lo + chunk, w * h)
        img[lo:hi] = _oracle_trace(scene, origins[lo:hi], dirs[lo:hi], settings, 0)
    return img.reshape(h, w, 3)

"""Scattering field abstraction and analytic reference fields.

A scattering field answers point queries F(x, w_l, w_o) -> (density, scatter):
  * density (sigma) is a nonnegative extinction coefficient and must not
    depend on either direction
  * scatter (rho) is an RGB fraction in [0, 1]^3 describing how much of the
    light arriving along w_l leaves toward w_o

Direction convention: w_l points from the query position toward the light;
w_o points along the viewing ray (camera into the scene). Both are unit.

Analytic fields double as training-data generators and as oracles; where a
closed-form line integral of density exists it is exposed so reference
renders can sidestep quadrature.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geom import Aabb, Ray, RigidTransform, ray_box_intersect_batch

__all__ = [
    "FieldQuery",
    "FieldResponse",
    "HomogeneousBoxField",
    "HomogeneousSphereField",
    "LambertianShellField",
    "ObjectInstance",
    "ScatteringField",
]


@dataclass(frozen=True)
class FieldQuery:
    position: np.ndarray
    light_dir: np.ndarray
    view_dir: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "light_dir", np.asarray(self.light_dir, dtype=np.float64))
        object.__setattr__(self, "view_dir", np.asarray(self.view_dir, dtype=np.float64))


@dataclass(frozen=True)
class FieldResponse:
    density: float
    scatter: np.ndarray


class ScatteringField(ABC):
    """Base class; implementations provide vectorized density and scatter."""

    @abstractmethod
    def canonical_bounds(self) -> Aabb:
        """Box (canonical frame) outside of which density is exactly zero."""

    @abstractmethod
    def density_many(self, positions: np.ndarray) -> np.ndarray:
        """(N, 3) positions -> (N,) nonnegative densities."""

    @abstractmethod
    def scatter_many(self, positions: np.ndarray, light_dirs: np.ndarray, view_dirs: np.ndarray) -> np.ndarray:
        """(N, 3) positions and unit directions -> (N, 3) scatter fractions."""

    def query(self, q: FieldQuery) -> FieldResponse:
        """Scalar query; output is clamped to the field contract here."""
        sigma = float(self.density_many(q.position[None, :])[0])
        rho = self.scatter_many(q.position[None, :], q.light_dir[None, :], q.view_dir[None, :])[0]
        return FieldResponse(max(sigma, 0.0), np.clip(rho, 0.0, 1.0))

    def segment_optical_depth(self, origins, dirs, t_begin, t_end) -> Optional[np.ndarray]:
        """Closed-form integral of density along ray segments, or None if
        no closed form exists and the caller must fall back to quadrature."""
        return None

    def support_window(self, origins, dirs):
        """(hit, t_near, t_far) tightened to the field's support when it is
        smaller than the canonical bounds, or None when the box is already
        tight. Lets dense marches concentrate their sample budget."""
        return None

    def material_segments(self, origins, dirs):
        """Piecewise-constant density runs along unit-speed rays as
        (starts, ends, densities), each (N, k) with unused slots collapsed
        to zero width, under support_window's clamping conventions. None
        when density varies inside its support and callers must sample."""
        return None


def _interval_overlap(lo_a, hi_a, lo_b, hi_b):
    return np.maximum(0.0, np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b))


def _ray_sphere_chord(origins, dirs, radius, t_begin, t_end):
    """Length of each segment's overlap with the sphere |x| <= radius."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    b = np.einsum("...i,...i->...", o, d)
    c = np.einsum("...i,...i->...", o, o) - radius * radius
    disc = b * b - c
    hit = disc > 0.0
    s = np.sqrt(np.where(hit, disc, 0.0))
    ta, tb = -b - s, -b + s
    return np.where(hit, _interval_overlap(ta, tb, t_begin, t_end), 0.0)


def _ray_sphere_window(origins, dirs, radius):
    """(hit, t_near, t_far) of unit rays against |x| <= radius; t_near is
    clamped to 0 and rays whose exit is behind the origin miss, matching the
    ray/box conventions."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    b = np.einsum("...i,...i->...", o, d)
    c = np.einsum("...i,...i->...", o, o) - radius * radius
    disc = b * b - c
    hit = disc > 0.0
    s = np.sqrt(np.where(hit, disc, 0.0))
    ta, tb = -b - s, -b + s
    hit &= tb > 0.0
    return hit, np.where(hit, np.maximum(ta, 0.0), 0.0), np.where(hit, tb, 0.0)


class HomogeneousSphereField(ScatteringField):
    """Constant density and isotropic albedo inside a sphere of given radius."""

    def __init__(self, radius: float, density: float, albedo):
        if radius <= 0.0 or density < 0.0:
            raise ValueError("radius must be positive and density nonnegative")
        self.radius = float(radius)
        self.density = float(density)
        self.albedo = np.clip(np.asarray(albedo, dtype=np.float64).reshape(3), 0.0, 1.0)

    def canonical_bounds(self) -> Aabb:
        return Aabb.centered([self.radius] * 3)

    def density_many(self, positions) -> np.ndarray:
        r2 = np.einsum("...i,...i->...", positions, positions)
        return np.where(r2 <= self.radius * self.radius, self.density, 0.0)

    def scatter_many(self, positions, light_dirs, view_dirs) -> np.ndarray:
        r2 = np.einsum("...i,...i->...", positions, positions)
        inside = r2 <= self.radius * self.radius
        return np.where(inside[..., None], self.albedo, 0.0)

    def segment_optical_depth(self, origins, dirs, t_begin, t_end) -> np.ndarray:
        return self.density * _ray_sphere_chord(origins, dirs, self.radius, t_begin, t_end)

    def support_window(self, origins, dirs):
        return _ray_sphere_window(origins, dirs, self.radius)

    def material_segments(self, origins, dirs):
        hit, t0, t1 = _ray_sphere_window(origins, dirs, self.radius)
        dens = np.where(hit, self.density, 0.0)
        return t0[:, None], t1[:, None], dens[:, None]


class LambertianShellField(ScatteringField):
    """Spherical shell [radius - thickness, radius] with diffuse shading:
    scatter = albedo * max(0, n . w_l) for outward radial normal n."""

    def __init__(self, radius: float, thickness: float, density: float, albedo):
        if not (0.0 < thickness <= radius):
            raise ValueError("need 0 < thickness <= radius")
        if density < 0.0:
            raise ValueError("density must be nonnegative")
        self.radius = float(radius)
        self.thickness = float(thickness)
        self.density = float(density)
        self.albedo = np.clip(np.asarray(albedo, dtype=np.float64).reshape(3), 0.0, 1.0)

    @property
    def inner_radius(self) -> float:
        return self.radius - self.thickness

    def canonical_bounds(self) -> Aabb:
        return Aabb.centered([self.radius] * 3)

    def _in_shell(self, positions) -> np.ndarray:
        r2 = np.einsum("...i,...i->...", positions, positions)
        return (r2 >= self.inner_radius**2) & (r2 <= self.radius**2)

    def density_many(self, positions) -> np.ndarray:
        return np.where(self._in_shell(positions), self.density, 0.0)

    def scatter_many(self, positions, light_dirs, view_dirs) -> np.ndarray:
        p = np.asarray(positions, dtype=np.float64)
        r = np.sqrt(np.einsum("...i,...i->...", p, p))
        safe_r = np.where(r > 0.0, r, 1.0)
        cosine = np.einsum("...i,...i->...", p, light_dirs) / safe_r
        lit = np.maximum(0.0, cosine)
        return np.where(self._in_shell(p)[..., None], self.albedo * lit[..., None], 0.0)

    def segment_optical_depth(self, origins, dirs, t_begin, t_end) -> np.ndarray:
        outer = _ray_sphere_chord(origins, dirs, self.radius, t_begin, t_end)
        inner = _ray_sphere_chord(origins, dirs, self.inner_radius, t_begin, t_end)
        return self.density * np.maximum(0.0, outer - inner)

    def support_window(self, origins, dirs):
        # the outer sphere, not the wall itself: rays through the hollow
        # interior still cross the wall twice inside this window
        return _ray_sphere_window(origins, dirs, self.radius)

    def material_segments(self, origins, dirs):
        ohit, o0, o1 = _ray_sphere_window(origins, dirs, self.radius)
        ihit, i0, i1 = _ray_sphere_window(origins, dirs, self.inner_radius)
        # the hollow core splits the outer chord in two; rays that miss the
        # core cross the wall in one run
        a1 = np.where(ihit, np.minimum(o1, i0), o1)
        b0 = np.where(ihit, np.maximum(o0, i1), o1)
        starts = np.stack([o0, b0], axis=1)
        ends = np.stack([np.maximum(a1, o0), np.maximum(o1, b0)], axis=1)
        dens = np.where(ohit, self.density, 0.0)
        return starts, ends, np.broadcast_to(dens[:, None], starts.shape)


class HomogeneousBoxField(ScatteringField):
    """Constant density and isotropic albedo inside an axis-aligned box;
    useful for slabs and ground patches."""

    def __init__(self, half_extents, density: float, albedo):
        if density < 0.0:
            raise ValueError("density must be nonnegative")
        self.half_extents = np.abs(np.asarray(half_extents, dtype=np.float64).reshape(3))
        if np.any(self.half_extents <= 0.0):
            raise ValueError("half extents must be positive")
        self.density = float(density)
        self.albedo = np.clip(np.asarray(albedo, dtype=np.float64).reshape(3), 0.0, 1.0)

    def canonical_bounds(self) -> Aabb:
        return Aabb.centered(self.half_extents)

    def _inside(self, positions) -> np.ndarray:
        return np.all(np.abs(positions) <= self.half_extents, axis=-1)

    def density_many(self, positions) -> np.ndarray:
        return np.where(self._inside(positions), self.density, 0.0)

    def scatter_many(self, positions, light_dirs, view_dirs) -> np.ndarray:
        return np.where(self._inside(positions)[..., None], self.albedo, 0.0)

    def segment_optical_depth(self, origins, dirs, t_begin, t_end) -> np.ndarray:
        hit, t0, t1 = ray_box_intersect_batch(origins, dirs, self.canonical_bounds())
        # ray_box clamps t0 to 0; recompute the unclamped entry for the overlap
        # since optical depth is needed for arbitrary segment windows.
        o = np.asarray(origins, dtype=np.float64)
        d = np.asarray(dirs, dtype=np.float64)
        zero = d == 0.0
        with np.errstate(divide="ignore"):
            inv = np.where(zero, np.inf, 1.0 / np.where(zero, 1.0, d))
        ta = (self.canonical_bounds().min_corner - o) * inv
        tb = (self.canonical_bounds().max_corner - o) * inv
        lo = np.where(zero, np.where(np.abs(o) <= self.half_extents, -np.inf, np.inf), np.minimum(ta, tb))
        hi = np.where(zero, np.where(np.abs(o) <= self.half_extents, np.inf, -np.inf), np.maximum(ta, tb))
        enter = lo.max(axis=-1)
        exit_ = hi.min(axis=-1)
        chord = np.where(enter < exit_, _interval_overlap(enter, exit_, t_begin, t_end), 0.0)
        return self.density * chord

    def material_segments(self, origins, dirs):
        hit, t0, t1 = ray_box_intersect_batch(origins, dirs, self.canonical_bounds())
        t0 = np.where(hit, t0, 0.0)
        t1 = np.where(hit, t1, 0.0)
        return t0[:, None], t1[:, None], np.where(hit, self.density, 0.0)[:, None]


@dataclass(frozen=True)
class ObjectInstance:
    """A scattering field placed in the scene by a rigid + uniform-scale
    transform. Density of scaled instances is divided by the scale so that
    optical depth along any world-space segment is preserved."""

    field: ScatteringField
    transform: RigidTransform = RigidTransform.identity()
    bounds: Optional[Aabb] = None

    def canonical_bounds(self) -> Aabb:
        return self.bounds if self.bounds is not None else self.field.canonical_bounds()

    def bounds_world(self) -> Aabb:
        corners = self.transform.points_to_world(self.canonical_bounds().corners())
        return Aabb(corners.min(axis=0), corners.max(axis=0))

    def intersect_batch(self, origins, dirs):
        """Ray/box pruning in the canonical frame; returns world-space t ranges."""
        local_o = self.transform.points_to_local(origins)
        local_d = self.transform.dirs_to_local(dirs)
        hit, t0, t1 = ray_box_intersect_batch(local_o, local_d, self.canonical_bounds())
        s = self.transform.uniform_scale
        return hit, t0 * s, t1 * s

    def intersect(self, ray: Ray):
        hit, t0, t1 = self.intersect_batch(ray.origin[None, :], ray.direction[None, :])
        if not hit[0]:
            return None
        return float(t0[0]), float(t1[0])

    def density_world(self, positions) -> np.ndarray:
        local = self.transform.points_to_local(positions)
        return self.field.density_many(local) / self.transform.uniform_scale

    def scatter_world(self, positions, light_dirs, view_dirs) -> np.ndarray:
        t = self.transform
        return self.field.scatter_many(
            t.points_to_local(positions), t.dirs_to_local(light_dirs), t.dirs_to_local(view_dirs)
        )

    def optical_depth_world(self, origins, dirs, t_begin, t_end) -> Optional[np.ndarray]:
        """Closed-form optical depth along world segments if the field has one.

        Uniform scaling cancels exactly: local depth over the rescaled
        segment equals world depth of the density-rescaled instance.
        """
        t = self.transform
        local_o = t.points_to_local(origins)
        local_d = t.dirs_to_local(dirs)
        s = t.uniform_scale
        return self.field.segment_optical_depth(
            local_o, local_d, np.asarray(t_begin) / s, np.asarray(t_end) / s
        )

    def query(self, position, light_dir, view_dir) -> FieldResponse:
        """Scalar world-frame query with the instance density rescale applied."""
        t = self.transform
        local = FieldQuery(
            t.point_to_local(np.asarray(position, dtype=np.float64)),
            t.dir_to_local(light_dir),
            t.dir_to_local(view_dir),
        )
        resp = self.field.query(local)
        return FieldResponse(resp.density / t.uniform_scale, resp.scatter)

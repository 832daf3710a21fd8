"""Analytic test scenes: signed distance fields, materials, emitters.

A scene is a flat list of objects, each one SDF shape plus a material
(albedo texture, roughness, specular tint, refractive index) and an
optional emission.  The scene SDF is the min over objects; sphere tracing
against it drives the ground-truth renderer, and the same Laplace-CDF
density / alpha-blending helpers are reused by the neural volume renderer
(they accept plain ndarrays or autodiff Vars).

Conventions: right-handed coordinates, y up; SDFs are negative inside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ops


class SceneError(ValueError):
    """Malformed scene description."""


class DegenerateGradient(RuntimeError):
    """SDF gradient vanished where a surface normal was required."""


# -- shapes ----------------------------------------------------------------

@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def distance(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    half: np.ndarray

    def distance(self, p):
        q = np.abs(p - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Plane:
    """Half space; points with dot(p, normal) > offset are outside."""

    normal: np.ndarray
    offset: float

    def distance(self, p):
        return p @ self.normal - self.offset


@dataclass(frozen=True)
class Union:
    shapes: tuple

    def distance(self, p):
        return np.min(np.stack([s.distance(p) for s in self.shapes], axis=-1), axis=-1)


@dataclass(frozen=True)
class SmoothUnion:
    """Polynomial smooth min, blend radius k."""

    a: object
    b: object
    k: float

    def distance(self, p):
        da, db = self.a.distance(p), self.b.distance(p)
        h = np.clip(0.5 + 0.5 * (db - da) / self.k, 0.0, 1.0)
        return db + (da - db) * h - self.k * h * (1.0 - h)


def _shape_from_json(d):
    kind = d.get("type")
    if kind == "sphere":
        return Sphere(np.asarray(d["center"], dtype=np.float64), float(d["radius"]))
    if kind == "box":
        return Box(np.asarray(d["center"], dtype=np.float64), np.asarray(d["half"], dtype=np.float64))
    if kind == "plane":
        n = np.asarray(d["normal"], dtype=np.float64)
        n = n / np.linalg.norm(n)
        return Plane(n, float(d["offset"]))
    if kind == "union":
        return Union(tuple(_shape_from_json(s) for s in d["shapes"]))
    if kind == "smooth_union":
        return SmoothUnion(_shape_from_json(d["a"]), _shape_from_json(d["b"]), float(d["k"]))
    raise SceneError(f"unknown shape type {kind!r}")


def _shape_to_json(s):
    if isinstance(s, Sphere):
        return {"type": "sphere", "center": s.center.tolist(), "radius": s.radius}
    if isinstance(s, Box):
        return {"type": "box", "center": s.center.tolist(), "half": s.half.tolist()}
    if isinstance(s, Plane):
        return {"type": "plane", "normal": s.normal.tolist(), "offset": s.offset}
    if isinstance(s, Union):
        return {"type": "union", "shapes": [_shape_to_json(c) for c in s.shapes]}
    if isinstance(s, SmoothUnion):
        return {"type": "smooth_union", "a": _shape_to_json(s.a), "b": _shape_to_json(s.b), "k": s.k}
    raise SceneError(f"unserializable shape {type(s).__name__}")


# -- textures ----------------------------------------------------------------

@dataclass(frozen=True)
class ConstantTexture:
    rgb: np.ndarray

    def sample(self, p):
        return np.broadcast_to(self.rgb, p.shape[:-1] + (3,)).copy()


@dataclass(frozen=True)
class CheckerTexture:
    """3D world-space checker; scale = cells per unit length."""

    rgb_a: np.ndarray
    rgb_b: np.ndarray
    scale: float

    def sample(self, p):
        cell = np.floor(p * self.scale).astype(np.int64)
        parity = (cell.sum(axis=-1) & 1).astype(bool)
        return np.where(parity[..., None], self.rgb_b, self.rgb_a)


def _texture_from_json(d):
    if isinstance(d, (list, tuple)):
        return ConstantTexture(np.asarray(d, dtype=np.float64))
    kind = d.get("type")
    if kind == "constant":
        return ConstantTexture(np.asarray(d["rgb"], dtype=np.float64))
    if kind == "checker":
        return CheckerTexture(np.asarray(d["rgb_a"], dtype=np.float64),
                              np.asarray(d["rgb_b"], dtype=np.float64), float(d["scale"]))
    raise SceneError(f"unknown texture type {kind!r}")


def _texture_to_json(t):
    if isinstance(t, ConstantTexture):
        return {"type": "constant", "rgb": t.rgb.tolist()}
    if isinstance(t, CheckerTexture):
        return {"type": "checker", "rgb_a": t.rgb_a.tolist(), "rgb_b": t.rgb_b.tolist(), "scale": t.scale}
    raise SceneError(f"unserializable texture {type(t).__name__}")


# -- scene -------------------------------------------------------------------

@dataclass(frozen=True)
class SceneObject:
    name: str
    shape: object
    albedo: object = field(default_factory=lambda: ConstantTexture(np.full(3, 0.5)))
    roughness: float = 0.3
    k_s: np.ndarray = field(default_factory=lambda: np.ones(3))
    eta: float = 1.5
    emission: np.ndarray = field(default_factory=lambda: np.zeros(3))
    in_mask: bool = False

    @property
    def is_emitter(self):
        return bool(np.any(self.emission > 0.0))


@dataclass(frozen=True)
class SceneModel:
    name: str
    objects: tuple
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def sdf(self, p):
        """Scene distance and index of the nearest object, point-wise."""
        d = np.stack([o.shape.distance(p) for o in self.objects], axis=-1)
        ids = np.argmin(d, axis=-1)
        return np.min(d, axis=-1), ids

    def distance(self, p):
        return self.sdf(p)[0]

    def normal(self, p, h=1e-5):
        """Central-difference SDF gradient, normalized.

        Raises DegenerateGradient if the gradient vanishes (points far from
        any surface, or exactly on a medial axis).
        """
        g = np.empty_like(p)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[..., k] = self.distance(p + e) - self.distance(p - e)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.any(n < 1e-12):
            raise DegenerateGradient("SDF gradient vanished at query point")
        return g / n

    def materials_at(self, p, ids):
        """Gather per-point material arrays for hit points p with object ids."""
        flat_p = p.reshape(-1, 3)
        flat_id = np.asarray(ids).reshape(-1)
        rho = np.zeros_like(flat_p)
        rough = np.zeros(flat_p.shape[0])
        k_s = np.ones_like(flat_p)
        eta = np.full(flat_p.shape[0], 1.5)
        emission = np.zeros_like(flat_p)
        in_mask = np.zeros(flat_p.shape[0], dtype=bool)
        for i, obj in enumerate(self.objects):
            sel = flat_id == i
            if not np.any(sel):
                continue
            rho[sel] = obj.albedo.sample(flat_p[sel])
            rough[sel] = obj.roughness
            k_s[sel] = obj.k_s
            eta[sel] = obj.eta
            emission[sel] = obj.emission
            in_mask[sel] = obj.in_mask
        shape = p.shape[:-1]
        return {"rho": rho.reshape(shape + (3,)),
                "roughness": rough.reshape(shape),
                "k_s": k_s.reshape(shape + (3,)),
                "eta": eta.reshape(shape),
                "emission": emission.reshape(shape + (3,)),
                "in_mask": in_mask.reshape(shape)}

    def object_bounding_sphere(self, margin=0.05):
        """Bounding sphere of the mask objects (the reconstruction targets)."""
        pts = []
        for o in self.objects:
            if not o.in_mask:
                continue
            if isinstance(o.shape, Sphere):
                pts.append((o.shape.center, o.shape.radius))
            elif isinstance(o.shape, Box):
                pts.append((o.shape.center, float(np.linalg.norm(o.shape.half))))
            else:
                raise SceneError("mask objects must be spheres or boxes")
        if not pts:
            raise SceneError("scene has no mask objects")
        centers = np.stack([c for c, _ in pts])
        center = 0.5 * (centers.max(axis=0) + centers.min(axis=0))
        radius = max(np.linalg.norm(c - center) + r for c, r in pts)
        return center, radius + margin

    def to_json(self):
        return {"name": self.name,
                "background": self.background.tolist(),
                "objects": [{"name": o.name,
                             "shape": _shape_to_json(o.shape),
                             "albedo": _texture_to_json(o.albedo),
                             "roughness": o.roughness,
                             "k_s": o.k_s.tolist(),
                             "eta": o.eta,
                             "emission": o.emission.tolist(),
                             "in_mask": o.in_mask} for o in self.objects]}

    @staticmethod
    def from_json(d):
        try:
            objects = tuple(SceneObject(name=o.get("name", f"object_{i}"),
                                        shape=_shape_from_json(o["shape"]),
                                        albedo=_texture_from_json(o.get("albedo", [0.5, 0.5, 0.5])),
                                        roughness=float(o.get("roughness", 0.3)),
                                        k_s=np.asarray(o.get("k_s", [1.0, 1.0, 1.0]), dtype=np.float64),
                                        eta=float(o.get("eta", 1.5)),
                                        emission=np.asarray(o.get("emission", [0.0, 0.0, 0.0]), dtype=np.float64),
                                        in_mask=bool(o.get("in_mask", False)))
                            for i, o in enumerate(d["objects"]))
        except KeyError as e:
            raise SceneError(f"missing scene field {e.args[0]!r}") from None
        return SceneModel(name=d.get("name", "scene"), objects=objects,
                          background=np.asarray(d.get("background", [0.0, 0.0, 0.0]), dtype=np.float64))


def load_scene(path):
    with open(path, "r") as f:
        return SceneModel.from_json(json.load(f))


def save_scene(scene, path):
    with open(path, "w") as f:
        json.dump(scene.to_json(), f, indent=2)


# -- sphere tracing -----------------------------------------------------------

def ray_surface_hit(scene, origins, dirs, t_min=0.0, t_max=6.0, eps=1e-4, max_steps=256):
    """Vectorized sphere tracing.

    Returns (t, hit, points, ids); rows with hit=False escaped past t_max or
    ran out of steps, their t/points/ids are unspecified.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    t = np.full(n, t_min)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        if not np.any(active):
            break
        p = origins[active] + t[active, None] * dirs[active]
        d, _ = scene.sdf(p)
        conv = d < eps
        idx = np.flatnonzero(active)
        hit[idx[conv]] = True
        t[idx] += np.where(conv, 0.0, np.maximum(d, 0.0))
        escaped = t[idx] > t_max
        active[idx[conv | escaped]] = False
    points = origins + t[:, None] * dirs
    _, ids = scene.sdf(points)
    return t, hit, points, ids


# -- volume model --------------------------------------------------------------

def laplace_cdf(x, beta):
    """CDF of the zero-mean Laplace distribution, overflow-safe, Var-friendly."""
    lo = 0.5 * ops.exp(ops.minimum(x, 0.0) / beta)
    hi = 1.0 - 0.5 * ops.exp(-ops.maximum(x, 0.0) / beta)
    return ops.where(ops.raw(x) <= 0.0, lo, hi)


def volsdf_density(d, alpha, beta):
    """Density sigma = alpha * Psi_beta(-d): alpha inside, 0 far outside,
    alpha/2 on the surface; beta sets the transition width."""
    return alpha * laplace_cdf(-1.0 * d, beta)


def blend_weights(sigma, delta, axis=-1):
    """Alpha-compositing weights of ray segments.

    sigma and delta hold per-sample density and segment length along the last
    (or given) axis.  Returns (w, bg) with w the per-sample blend weights and
    bg the residual transmittance; sum(w) + bg == 1 by telescoping.
    """
    tau = sigma * delta
    acc = ops.cumsum(tau, axis=axis)
    trans_in = ops.exp(-1.0 * (acc - tau))      # transmittance entering each segment
    w = trans_in * (1.0 - ops.exp(-1.0 * tau))
    bg = ops.exp(-1.0 * ops.sum_(tau, axis=axis))
    return w, bg


# -- stock scenes ---------------------------------------------------------------

def two_sphere_box(name="two_sphere_box"):
    """Closed five-wall box, one area light, two dielectric spheres.

    The spheres are the mask objects; the checker on the large one creates
    albedo structure that intensity-only fitting tends to bake into geometry.
    """
    white = np.array([0.72, 0.72, 0.72])
    objects = (
        SceneObject("floor", Plane(np.array([0.0, 1.0, 0.0]), -1.0),
                    ConstantTexture(white), roughness=0.6),
        SceneObject("ceiling", Plane(np.array([0.0, -1.0, 0.0]), -1.0),
                    ConstantTexture(white), roughness=0.6),
        SceneObject("back", Plane(np.array([0.0, 0.0, 1.0]), -1.0),
                    ConstantTexture(white), roughness=0.6),
        SceneObject("left", Plane(np.array([1.0, 0.0, 0.0]), -1.0),
                    ConstantTexture(np.array([0.63, 0.065, 0.05])), roughness=0.6),
        SceneObject("right", Plane(np.array([-1.0, 0.0, 0.0]), -1.0),
                    ConstantTexture(np.array([0.14, 0.45, 0.091])), roughness=0.6),
        SceneObject("light", Box(np.array([0.0, 0.97, 0.0]), np.array([0.38, 0.02, 0.38])),
                    ConstantTexture(np.zeros(3)), roughness=0.8,
                    emission=np.array([10.0, 10.0, 10.0])),
        SceneObject("sphere_a", Sphere(np.array([-0.36, -0.62, -0.14]), 0.38),
                    CheckerTexture(np.array([0.83, 0.79, 0.22]), np.array([0.08, 0.12, 0.55]), 6.0),
                    roughness=0.22, in_mask=True),
        SceneObject("sphere_b", Sphere(np.array([0.41, -0.68, 0.22]), 0.32),
                    ConstantTexture(np.array([0.75, 0.28, 0.23])), roughness=0.12, in_mask=True),
    )
    return SceneModel(name=name, objects=objects)

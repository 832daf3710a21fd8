"""Differentiable last-bounce polarimetric renderer.

Shades one pixel as a fixed-quadrature integral over the hemisphere of the
blended field normal: learned already-rotated incident Stokes vectors enter
the diffuse and specular Mueller matrices, whose outputs are rotated into
the camera measurement frame and summed,

    s_cam = R_dif . (w Sum_i M_dif(wi) s_dif(wi))
          + w Sum_i R_spec(wi) . M_spec(wi) s_spec(wi).

The diffuse out frame depends only on (wo, n), so its camera rotation sits
outside the sum; the specular frame follows the per-sample half vector and
must stay inside.  Frame axes, quadrature directions, and half vectors are
detached geometry; gradients flow through cosines, Fresnel/GGX factors,
the blended fields, and the incident Stokes networks.

The scalar path (`shade_pixel_nopol`) keeps only the (0,0) Mueller entries
and an intensity-only incident field: the no-polarization ablation.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import ops
from .fields import EmptyRay, volume_aggregate
from .pbrdf import (COS_EPS, fresnel_reflect_factors, fresnel_transmit_factors,
                    ggx_d, smith_g1)
from .tracer import _plane_axis, _rel_angle

N_QUAD_TRAIN = 128
N_QUAD_EVAL = 256
DEFAULT_ETA = 1.5     # known dielectric index, matching the GT scenes
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


class QuadratureSet:
    """Fixed hemisphere directions (P, Q, 3) with scalar weight 2*pi/Q."""

    __slots__ = ("directions", "weight")

    def __init__(self, directions, weight):
        self.directions = directions
        self.weight = weight


def fibonacci_hemisphere(n, normal):
    """Deterministic Fibonacci lattice rotated from +z onto each normal.

    normal: (P, 3) unit vectors (plain arrays; the lattice placement is
    not differentiated).  All returned directions satisfy dot(d, n) > 0.
    """
    if n < 1:
        raise ValueError("quadrature needs at least one direction")
    i = np.arange(n)
    z = (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    ph = i * GOLDEN_ANGLE
    lattice = np.stack([r * np.cos(ph), r * np.sin(ph), z], axis=-1)   # (Q,3)

    b = np.atleast_2d(np.asarray(normal, dtype=np.float64))
    # minimal rotation taking +z to b (Rodrigues); pi flip when b ~ -z
    v = np.stack([-b[:, 1], b[:, 0], np.zeros(b.shape[0])], axis=-1)
    c = b[:, 2]
    k = np.zeros((b.shape[0], 3, 3))
    k[:, 0, 1] = -v[:, 2]; k[:, 0, 2] = v[:, 1]
    k[:, 1, 0] = v[:, 2];  k[:, 1, 2] = -v[:, 0]
    k[:, 2, 0] = -v[:, 1]; k[:, 2, 1] = v[:, 0]
    denom = np.where(c > -1.0 + 1e-9, 1.0 + c, 1.0)
    rot = np.eye(3) + k + (k @ k) / denom[:, None, None]
    flip = np.diag([1.0, -1.0, -1.0])
    rot = np.where((c > -1.0 + 1e-9)[:, None, None], rot, flip)
    dirs = (rot @ lattice.T).transpose(0, 2, 1)
    return QuadratureSet(dirs, 2.0 * np.pi / n)


# -- Var/array shape helpers --------------------------------------------------

def _reshape(x, shape):
    return ad.reshape(x, shape) if isinstance(x, ad.Var) else np.reshape(x, shape)


def _chan(x):
    """Append a trailing RGB broadcast axis, Var-safe."""
    if isinstance(x, ad.Var):
        return ad.reshape(x, x.data.shape + (1,))
    return np.asarray(x)[..., None]


def _dot_normal(wi, normal, p, q):
    """dot(wi, n) as (P, Q); differentiable when normal is a Var."""
    if isinstance(normal, ad.Var):
        n3 = _reshape(normal, (p, 1, 3))
        return ops.sum_(wi * n3, axis=-1)
    return np.sum(wi * normal[:, None, :], axis=-1)


def _rot_pair(phi):
    return np.cos(2.0 * phi), np.sin(2.0 * phi)


# -- lobe shading ------------------------------------------------------------------

def shade_diffuse(normal, albedo, wo, x_cam, quad, s_dif, eta=DEFAULT_ETA):
    """Diffuse Stokes in the camera frame, rotation outside the sum.

    s_dif: (P, Q, 3, 3) already-rotated incident Stokes in the per-direction
    plane-of-incidence frame (axis cross(wi, n)).  The diffuse Mueller matrix
    has zero third row and column, so only s0/s1 of the incident vectors are
    read and the returned s2 comes purely from the camera rotation.
    """
    p, q = quad.directions.shape[:2]
    wi = quad.directions
    n_data = normal.data if isinstance(normal, ad.Var) else normal

    cos_i = _dot_normal(wi, normal, p, q)
    cos_o = ops.sum_(wo * normal, axis=-1)
    a_i, b_i, _, _ = fresnel_transmit_factors(ops.clip(cos_i, COS_EPS, 1.0), eta, "into")
    a_o, b_o, _, _ = fresnel_transmit_factors(ops.clip(cos_o, COS_EPS, 1.0), eta, "into")
    a_o = _chan(_reshape(a_o, (p, 1)))
    b_o = _chan(_reshape(b_o, (p, 1)))

    c = _reshape(albedo, (p, 1, 3)) * (1.0 / np.pi)
    in0 = s_dif[:, :, 0]
    in1 = s_dif[:, :, 1]
    t0 = _chan(a_i * cos_i) * in0 + _chan(b_i * cos_i) * in1
    sum0 = ops.sum_(c * a_o * t0, axis=1) * quad.weight
    sum1 = ops.sum_(c * b_o * t0, axis=1) * quad.weight

    # camera rotation, differentiable through the normal when it is a Var;
    # the axis degenerates when wo ~ n, but b_o -> 0 there so the rotated
    # components vanish and the angle stops mattering
    if isinstance(normal, ad.Var):
        u = ops.normalize(ops.cross(wo, normal), eps=1e-6)
        y_from = ops.cross(wo, u)
        phi = ops.arctan2(ops.vdot(y_from, x_cam), ops.vdot(u, x_cam))
        c2 = _reshape(ops.cos(2.0 * phi), (p, 1))
        s2 = _reshape(ops.sin(2.0 * phi), (p, 1))
    else:
        sd_out = _plane_axis(wo, n_data)
        c2, s2 = _rot_pair(_rel_angle(wo, sd_out, x_cam))
        c2, s2 = c2[:, None], s2[:, None]
    out0 = sum0
    out1 = c2 * sum1
    out2 = -(s2 * sum1)
    return ops.stack([out0, out1, out2], axis=1)


def shade_specular(normal, roughness, wo, x_cam, quad, s_spec,
                   k_s=1.0, eta=DEFAULT_ETA):
    """Specular Stokes in the camera frame, rotation inside the sum.

    s_spec: (P, Q, 3, 3) incident Stokes in the shared half-vector frame
    (axis cross(wi, h)).  Returns (stokes, facing): pixels whose blended
    normal backfaces the camera are zeroed and flagged.
    """
    p, q = quad.directions.shape[:2]
    wi = quad.directions
    n_data = normal.data if isinstance(normal, ad.Var) else normal
    facing = np.sum(n_data * wo, axis=-1) > 0.0

    h = wi + wo[:, None, :]
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    cos_d = np.clip(np.sum(wi * h, axis=-1), COS_EPS, 1.0)

    cos_i = _dot_normal(wi, normal, p, q)
    cos_o = _reshape(ops.sum_(wo * normal, axis=-1), (p, 1))
    ndh = _dot_normal(h, normal, p, q)
    r = _reshape(roughness, (p, 1))
    d = ggx_d(ndh, r)
    g = smith_g1(ops.clip(cos_i, COS_EPS, 1.0), r) * smith_g1(ops.clip(cos_o, COS_EPS, 1.0), r)
    fa, fb, fc = fresnel_reflect_factors(cos_d, eta)
    denom = 4.0 * ops.clip(cos_o, COS_EPS, 1.0)
    scale = _chan((k_s * d) * g / denom)

    in0 = s_spec[:, :, 0]
    in1 = s_spec[:, :, 1]
    in2 = s_spec[:, :, 2]
    out0 = scale * (fa[..., None] * in0 + fb[..., None] * in1)
    out1 = scale * (fb[..., None] * in0 + fa[..., None] * in1)
    out2 = scale * (fc[..., None] * in2)

    sh = _plane_axis(wi, h)
    c2, s2 = _rot_pair(_rel_angle(np.broadcast_to(wo[:, None, :], wi.shape), sh,
                                  np.broadcast_to(x_cam[:, None, :], wi.shape)))
    c2 = c2[..., None]
    s2 = s2[..., None]
    rot1 = c2 * out1 + s2 * out2
    rot2 = -s2 * out1 + c2 * out2

    w = quad.weight * facing.astype(np.float64)[:, None]
    cam0 = ops.sum_(out0, axis=1) * w
    cam1 = ops.sum_(rot1, axis=1) * w
    cam2 = ops.sum_(rot2, axis=1) * w
    return ops.stack([cam0, cam1, cam2], axis=1), facing


# -- full pixel paths -----------------------------------------------------------

def shade_pixel(bundle, origins, dirs, x_cam, n_quad=N_QUAD_TRAIN,
                eta=DEFAULT_ETA, k_s=1.0, incident_fn=None, aggregate=None,
                rng=None, with_parts=False, quad=None):
    """volume_aggregate -> incident field per direction -> dif + spec shading.

    Returns (stokes (P,3,3) on the tape, valid mask).  Rays whose blend never
    reaches the surface band, or whose normal backfaces the camera, come back
    zero with valid False.  incident_fn(x, n, wi, wo) -> (s_dif, s_spec)
    substitutes the learned field (oracle hook); aggregate substitutes the
    volume pass (frozen-geometry cache); quad pins the lattice (detached
    sampling decisions held fixed, e.g. for finite-difference checks).
    with_parts additionally returns the camera-frame diffuse and specular
    Stokes.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    p = origins.shape[0]
    wo = -dirs

    try:
        res = aggregate if aggregate is not None else volume_aggregate(bundle, origins, dirs, rng=rng)
    except EmptyRay:
        zero = bundle.tape.const(np.zeros((p, 3, 3), dtype=bundle.dtype))
        if with_parts:
            return zero, np.zeros(p, dtype=bool), zero, zero
        return zero, np.zeros(p, dtype=bool)

    if quad is None:
        quad = fibonacci_hemisphere(n_quad, res.normal.data)
    n_quad = quad.directions.shape[1]
    wi_flat = quad.directions.reshape(-1, 3)
    x_rep = np.repeat(res.x_surf, n_quad, axis=0)

    if incident_fn is None:
        s_dif, s_spec = bundle.incident(x_rep, wi_flat)
    else:
        n_rep = np.repeat(res.normal.data, n_quad, axis=0)
        wo_rep = np.repeat(wo, n_quad, axis=0)
        s_dif, s_spec = incident_fn(x_rep, n_rep, wi_flat, wo_rep)
    s_dif = _reshape(s_dif, (p, n_quad, 3, 3))
    s_spec = _reshape(s_spec, (p, n_quad, 3, 3))

    cam_dif = shade_diffuse(res.normal, res.albedo, wo, x_cam, quad, s_dif, eta=eta)
    cam_spec, facing = shade_specular(res.normal, res.roughness, wo, x_cam, quad,
                                      s_spec, k_s=k_s, eta=eta)
    valid = res.valid & facing
    keep = bundle.tape.const(valid.astype(bundle.dtype)[:, None, None])
    stokes = (cam_dif + cam_spec) * keep
    if with_parts:
        return stokes, valid, cam_dif * keep, cam_spec * keep
    return stokes, valid


def shade_pixel_nopol(bundle, origins, dirs, n_quad=N_QUAD_TRAIN,
                      eta=DEFAULT_ETA, k_s=1.0, intensity_fn=None,
                      aggregate=None, rng=None, with_parts=False, quad=None):
    """Scalar ablation: s0 Mueller entries only, intensity-only incident field.

    Returns (rgb (P,3) on the tape, valid mask).
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    p = origins.shape[0]
    wo = -dirs

    try:
        res = aggregate if aggregate is not None else volume_aggregate(bundle, origins, dirs, rng=rng)
    except EmptyRay:
        zero = bundle.tape.const(np.zeros((p, 3), dtype=bundle.dtype))
        if with_parts:
            return zero, np.zeros(p, dtype=bool), zero, zero
        return zero, np.zeros(p, dtype=bool)

    if quad is None:
        quad = fibonacci_hemisphere(n_quad, res.normal.data)
    q = quad.directions.shape[1]
    wi = quad.directions
    x_rep = np.repeat(res.x_surf, q, axis=0)
    wi_flat = wi.reshape(-1, 3)

    if intensity_fn is None:
        lum = bundle.incident_intensity(x_rep, wi_flat)
    else:
        lum = intensity_fn(x_rep, np.repeat(res.normal.data, q, axis=0),
                           wi_flat, np.repeat(wo, q, axis=0))
    lum = _reshape(lum, (p, q, 3))

    facing = np.sum(res.normal.data * wo, axis=-1) > 0.0
    cos_i = _dot_normal(wi, res.normal, p, q)
    cos_o = ops.sum_(wo * res.normal, axis=-1)
    a_i, _, _, _ = fresnel_transmit_factors(ops.clip(cos_i, COS_EPS, 1.0), eta, "into")
    a_o, _, _, _ = fresnel_transmit_factors(ops.clip(cos_o, COS_EPS, 1.0), eta, "into")
    dif = _reshape(res.albedo, (p, 1, 3)) * (1.0 / np.pi) \
        * _chan(_reshape(a_o, (p, 1))) * _chan(a_i * cos_i) * lum

    h = wi + wo[:, None, :]
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    cos_d = np.clip(np.sum(wi * h, axis=-1), COS_EPS, 1.0)
    ndh = _dot_normal(h, res.normal, p, q)
    r = _reshape(res.roughness, (p, 1))
    cos_o1 = _reshape(cos_o, (p, 1))
    d = ggx_d(ndh, r)
    g = smith_g1(ops.clip(cos_i, COS_EPS, 1.0), r) * smith_g1(ops.clip(cos_o1, COS_EPS, 1.0), r)
    fa, _, _ = fresnel_reflect_factors(cos_d, eta)
    denom = 4.0 * ops.clip(cos_o1, COS_EPS, 1.0)
    spec = _chan(((k_s * d) * g / denom) * fa) * lum

    valid = res.valid & facing
    keep = bundle.tape.const(valid.astype(bundle.dtype)[:, None])
    dif_rgb = ops.sum_(dif, axis=1) * quad.weight * keep
    spec_rgb = ops.sum_(spec, axis=1) * quad.weight * keep
    rgb = dif_rgb + spec_rgb
    if with_parts:
        return rgb, valid, dif_rgb, spec_rgb
    return rgb, valid


# -- whole-frame evaluation --------------------------------------------------------

def render_bundle_view(bundle, pose, n_quad=N_QUAD_EVAL, chunk=512,
                       nopol=False, rng=None):
    """Chunked forward render of the learned fields for one camera pose.

    Returns dict: stokes (H,W,3,3), normal, albedo (H,W,3), roughness,
    mask (H,W), diffuse/specular s0 (H,W,3).  The nopol path renders its
    scalar rgb into the s0 plane with s1 = s2 = 0.  Tape state is reset
    between chunks; this path is for evaluation, not optimization.
    """
    from .camera import measurement_frame, pixel_rays

    height, width = pose.height, pose.width
    origins, dirs = pixel_rays(pose)
    frame = measurement_frame(pose, dirs)

    n_px = origins.shape[0]
    out = {
        "stokes": np.zeros((n_px, 3, 3)),
        "normal": np.zeros((n_px, 3)),
        "albedo": np.zeros((n_px, 3)),
        "roughness": np.zeros(n_px),
        "mask": np.zeros(n_px),
        "diffuse": np.zeros((n_px, 3)),
        "specular": np.zeros((n_px, 3)),
    }

    for lo in range(0, n_px, chunk):
        sel = slice(lo, min(lo + chunk, n_px))
        o_c, d_c, x_c = origins[sel], dirs[sel], frame.x_axis[sel]
        try:
            res = volume_aggregate(bundle, o_c, d_c, rng=rng)
        except EmptyRay:
            bundle.tape.reset()
            continue
        if nopol:
            rgb, valid, dif, spec = shade_pixel_nopol(
                bundle, o_c, d_c, n_quad=n_quad, aggregate=res, with_parts=True)
            out["stokes"][sel, 0] = rgb.data
            out["diffuse"][sel] = dif.data
            out["specular"][sel] = spec.data
        else:
            stokes, valid, dif, spec = shade_pixel(
                bundle, o_c, d_c, x_c, n_quad=n_quad, aggregate=res, with_parts=True)
            out["stokes"][sel] = stokes.data
            out["diffuse"][sel] = dif.data[:, 0]
            out["specular"][sel] = spec.data[:, 0]
        out["normal"][sel] = res.normal.data * valid[:, None]
        out["albedo"][sel] = res.albedo.data * valid[:, None]
        out["roughness"][sel] = res.roughness.data * valid
        out["mask"][sel] = res.w_sum.data * res.valid
        bundle.tape.reset()

    shp = (height, width)
    return {
        "stokes": out["stokes"].reshape(shp + (3, 3)),
        "normal": out["normal"].reshape(shp + (3,)),
        "albedo": out["albedo"].reshape(shp + (3,)),
        "roughness": out["roughness"].reshape(shp),
        "mask": out["mask"].reshape(shp),
        "diffuse": out["diffuse"].reshape(shp + (3,)),
        "specular": out["specular"].reshape(shp + (3,)),
    }

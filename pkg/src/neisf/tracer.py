"""Ground-truth polarimetric path tracer.

Renders multi-bounce Stokes images of analytic scenes and serves as the
brute-force oracle for already-rotated incident Stokes queries.  Rays are
traced camera-outward while a running Mueller throughput matrix maps light
entering the path's far end into the camera's measurement frame:

    s_cam = A_k . s_k,   A_k = R_cam M_1 R_12 M_2 ... R M_k

Each bounce multiplies the chain by (rotation in) . (M_dif + M_spec) .
(rotation out), divided by the one-sample MIS mixture pdf of the sampled
direction (cosine and GGX-VNDF lobes, balance heuristic).

Randomness is counter-based: every uniform is a hash of (seed, stream,
pixel, sample, depth, dim), so renders are bit-identical regardless of
batch sizes or traversal order, and pixel/sample streams never collide.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import formats
from .camera import measurement_frame, pixel_rays
from .pbrdf import COS_EPS, fresnel_reflect_factors, fresnel_transmit_factors, ggx_d, smith_g1
from .polcore import canonical_x_axis
from .scene import ray_surface_hit

RAY_OFFSET = 3e-4     # self-intersection guard along the normal
FIREFLY_S0 = 1e4      # per-event radiance clamp (documented bias)
LUMA = np.array([0.2126, 0.7152, 0.0722])
PROBE_STREAM = 1 << 20   # RNG stream id for oracle probes, clear of view ids


@dataclass(frozen=True)
class PathConfig:
    max_depth: int = 6
    spp: int = 64
    seed: int = 0
    rr_start: int = 3        # first depth at which Russian roulette may kill
    unpolarized: bool = False  # ablation: keep only s0 parts of Fresnel terms
    t_max: float = 6.0


# -- counter-based RNG -----------------------------------------------------

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(h):
    h = (h ^ (h >> np.uint64(30))) * _M1
    h = (h ^ (h >> np.uint64(27))) * _M2
    return h ^ (h >> np.uint64(31))


def stream_uniform(seed, stream, pixel, sample, depth, dim):
    """Deterministic uniform in [0,1) for each (pixel) in the batch."""
    with np.errstate(over="ignore"):   # uint64 wraparound is the point
        h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ (np.uint64(stream) * _GOLD))
        h = _mix(h + np.asarray(pixel, dtype=np.uint64) * _GOLD)
        h = _mix(h + np.uint64(sample) * _M1)
        h = _mix(h + np.uint64(depth * 64 + dim) * _M2)
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


# -- geometry helpers ---------------------------------------------------------

def _normalize(v, eps=1e-12):
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), eps)


def _plane_axis(w, ref):
    """s axis of the plane spanned by (w, ref); fixed fallback when parallel."""
    u = np.cross(w, ref)
    nrm = np.linalg.norm(u, axis=-1, keepdims=True)
    ok = nrm > 1e-8
    return np.where(ok, u / np.where(ok, nrm, 1.0), canonical_x_axis(w))


def _rel_angle(prop, x_from, x_to):
    """Signed rotation about prop taking x_from onto x_to."""
    y_from = np.cross(prop, x_from)
    return np.arctan2(np.sum(y_from * x_to, axis=-1), np.sum(x_from * x_to, axis=-1))


def _rot2(phi):
    """Stokes rotator R(phi) as (N,1,3,3) for per-channel matmul broadcasting."""
    c, s = np.cos(2.0 * phi), np.sin(2.0 * phi)
    m = np.zeros(phi.shape + (3, 3))
    m[..., 0, 0] = 1.0
    m[..., 1, 1] = c
    m[..., 1, 2] = s
    m[..., 2, 1] = -s
    m[..., 2, 2] = c
    return m[:, None]


def _onb(w):
    x = canonical_x_axis(w)
    return x, np.cross(w, x)


def _cosine_sample(n, u1, u2):
    t, b = _onb(n)
    r = np.sqrt(u1)
    ph = 2.0 * np.pi * u2
    z = np.sqrt(np.maximum(1.0 - u1, 0.0))
    return (r * np.cos(ph))[:, None] * t + (r * np.sin(ph))[:, None] * b + z[:, None] * n


def _vndf_sample(n, wo, roughness, u1, u2):
    """Visible-normal GGX sampling (Heitz 2018); returns reflected wi."""
    alpha = roughness * roughness
    t, b = _onb(n)
    wol = np.stack([np.sum(wo * t, -1), np.sum(wo * b, -1), np.sum(wo * n, -1)], axis=-1)
    v = _normalize(np.stack([alpha * wol[:, 0], alpha * wol[:, 1], wol[:, 2]], axis=-1))
    lensq = v[:, 0] ** 2 + v[:, 1] ** 2
    inv = 1.0 / np.sqrt(np.maximum(lensq, 1e-16))
    t1 = np.where((lensq > 1e-16)[:, None],
                  np.stack([-v[:, 1] * inv, v[:, 0] * inv, np.zeros_like(inv)], axis=-1),
                  np.array([1.0, 0.0, 0.0]))
    t2 = np.cross(v, t1)
    r = np.sqrt(u1)
    ph = 2.0 * np.pi * u2
    p1 = r * np.cos(ph)
    p2 = r * np.sin(ph)
    s = 0.5 * (1.0 + v[:, 2])
    p2 = (1.0 - s) * np.sqrt(np.maximum(1.0 - p1 * p1, 0.0)) + s * p2
    pz = np.sqrt(np.maximum(1.0 - p1 * p1 - p2 * p2, 0.0))
    nh = p1[:, None] * t1 + p2[:, None] * t2 + pz[:, None] * v
    hl = _normalize(np.stack([alpha * nh[:, 0], alpha * nh[:, 1],
                              np.maximum(nh[:, 2], 1e-9)], axis=-1))
    h = hl[:, 0:1] * t + hl[:, 1:2] * b + hl[:, 2:3] * n
    wi = 2.0 * np.sum(wo * h, -1, keepdims=True) * h - wo
    return wi


def _mixture_pdf(n, wo, wi, roughness):
    """Balance-heuristic mixture of cosine and VNDF pdfs, 50/50 lobe choice."""
    cos_i = np.sum(n * wi, -1)
    pdf_cos = np.maximum(cos_i, 0.0) / np.pi
    h = _normalize(wi + wo)
    ndh = np.sum(n * h, -1)
    cos_o = np.maximum(np.sum(n * wo, -1), COS_EPS)
    pdf_spec = ggx_d(ndh, roughness) * smith_g1(cos_o, roughness) / (4.0 * cos_o)
    return 0.5 * (pdf_cos + pdf_spec)


# -- lobe Mueller matrices (raw batched arrays) -----------------------------------

def _diffuse_matrix(rho, cos_i, cos_o, eta, unpolarized):
    a_i, b_i, _, _ = fresnel_transmit_factors(np.clip(cos_i, COS_EPS, 1.0), eta, "into")
    a_o, b_o, _, _ = fresnel_transmit_factors(np.clip(cos_o, COS_EPS, 1.0), eta, "into")
    if unpolarized:
        b_i = np.zeros_like(b_i)
        b_o = np.zeros_like(b_o)
    c = rho / np.pi * cos_i[:, None]            # (N, C)
    m = np.zeros(c.shape + (3, 3))
    m[..., 0, 0] = c * (a_o * a_i)[:, None]
    m[..., 0, 1] = c * (a_o * b_i)[:, None]
    m[..., 1, 0] = c * (b_o * a_i)[:, None]
    m[..., 1, 1] = c * (b_o * b_i)[:, None]
    return m


def _specular_matrix(k_s, roughness, cos_i, cos_o, cos_d, ndh, eta, unpolarized):
    d = ggx_d(ndh, roughness)
    g = smith_g1(cos_i, roughness) * smith_g1(cos_o, roughness)
    fa, fb, fc = fresnel_reflect_factors(np.clip(cos_d, COS_EPS, 1.0), eta)
    if unpolarized:
        fb = np.zeros_like(fb)
        fc = np.zeros_like(fc)
    scale = k_s * (d * g / (4.0 * np.maximum(cos_o, COS_EPS)))[:, None]   # (N, C)
    m = np.zeros(scale.shape + (3, 3))
    m[..., 0, 0] = scale * fa[:, None]
    m[..., 0, 1] = scale * fb[:, None]
    m[..., 1, 0] = scale * fb[:, None]
    m[..., 1, 1] = scale * fa[:, None]
    m[..., 2, 2] = scale * fc[:, None]
    return m


def _emit_event(out, chain, sel, radiance):
    """out[sel] += clamp(chain[sel] applied to unpolarized radiance)."""
    contrib = chain[sel][..., 0].transpose(0, 2, 1) * radiance[:, None, :]   # (M,3,C)
    s0 = contrib[:, 0, :]
    scale = np.minimum(1.0, FIREFLY_S0 / np.maximum(s0, 1e-12))
    np.add.at(out, sel, contrib * scale[:, None, :])


# -- core sampler ---------------------------------------------------------------

def trace_sample(scene, origins, dirs, x_axis, cfg, stream, pixels, sample, split=False):
    """One path-traced sample per ray.

    Returns (mixed, diffuse, specular) Stokes, each (N, 3, C), expressed in
    the frame with propagation -dirs and the given transverse x_axis.  The
    diffuse/specular pair splits by the lobe of the FIRST bounce and holds
    reflected light only (direct emission goes to mixed alone).
    """
    n_rays = origins.shape[0]
    eye = np.broadcast_to(np.eye(3), (n_rays, 3, 3, 3)).copy()
    chain = eye                       # Mueller throughput into the output frame
    chain_d = np.zeros_like(chain)    # first-bounce diffuse part
    chain_s = np.zeros_like(chain)
    out = np.zeros((n_rays, 3, 3))
    out_d = np.zeros_like(out)
    out_s = np.zeros_like(out)
    alive = np.ones(n_rays, dtype=bool)
    o_cur = np.array(origins, dtype=np.float64)
    d_cur = np.array(dirs, dtype=np.float64)
    x_cur = np.array(x_axis, dtype=np.float64)
    bg = scene.background

    for depth in range(1, cfg.max_depth + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        t, hit, p, ids = ray_surface_hit(scene, o_cur[idx], d_cur[idx], t_max=cfg.t_max)
        miss_idx = idx[~hit]
        if miss_idx.size and np.any(bg > 0.0):
            radiance = np.broadcast_to(bg, (miss_idx.size, 3))
            _emit_event(out, chain, miss_idx, radiance)
            if depth > 1:
                _emit_event(out_d, chain_d, miss_idx, radiance)
                _emit_event(out_s, chain_s, miss_idx, radiance)
        alive[miss_idx] = False
        hidx = idx[hit]
        if hidx.size == 0:
            continue
        ph = p[hit]
        nrm = scene.normal(ph)
        wo = -d_cur[hidx]
        cos_o = np.sum(nrm * wo, -1)
        nrm = np.where((cos_o < 0.0)[:, None], -nrm, nrm)   # two-sided shading
        cos_o = np.abs(cos_o)
        mats = scene.materials_at(ph, ids[hit])
        if np.any(mats["emission"] > 0.0):
            _emit_event(out, chain, hidx, mats["emission"])
            if depth > 1:
                _emit_event(out_d, chain_d, hidx, mats["emission"])
                _emit_event(out_s, chain_s, hidx, mats["emission"])
        if depth == cfg.max_depth:
            alive[hidx] = False
            continue

        u_lobe = stream_uniform(cfg.seed, stream, pixels[hidx], sample, depth, 0)
        u1 = stream_uniform(cfg.seed, stream, pixels[hidx], sample, depth, 1)
        u2 = stream_uniform(cfg.seed, stream, pixels[hidx], sample, depth, 2)
        rough = mats["roughness"]
        wi_c = _cosine_sample(nrm, u1, u2)
        wi_v = _vndf_sample(nrm, wo, rough, u1, u2)
        wi = np.where((u_lobe < 0.5)[:, None], wi_c, wi_v)
        cos_i = np.sum(nrm * wi, -1)
        pdf = _mixture_pdf(nrm, wo, wi, rough)
        valid = (cos_i > 1e-6) & (cos_o > 1e-6) & (pdf > 1e-9)

        h = _normalize(wi + wo)
        cos_d = np.sum(wi * h, -1)
        ndh = np.sum(nrm * h, -1)
        m_dif = _diffuse_matrix(mats["rho"], cos_i, cos_o, mats["eta"], cfg.unpolarized)
        m_spec = _specular_matrix(mats["k_s"], rough, cos_i, cos_o, cos_d, ndh,
                                  mats["eta"], cfg.unpolarized)

        sd_in = _plane_axis(wi, nrm)
        sd_out = _plane_axis(wo, nrm)
        sh = _plane_axis(wi, h)
        x_next = canonical_x_axis(-wi)
        xc = x_cur[hidx]
        md = _rot2(_rel_angle(wo, sd_out, xc)) @ m_dif @ _rot2(_rel_angle(-wi, x_next, sd_in))
        ms = _rot2(_rel_angle(wo, sh, xc)) @ m_spec @ _rot2(_rel_angle(-wi, x_next, sh))
        inv_pdf = np.where(valid, 1.0 / np.maximum(pdf, 1e-12), 0.0)[:, None, None, None]

        new_chain = chain[hidx] @ ((md + ms) * inv_pdf)
        if depth == 1:
            new_d = chain[hidx] @ (md * inv_pdf)
            new_s = chain[hidx] @ (ms * inv_pdf)
        else:
            new_d = chain_d[hidx] @ ((md + ms) * inv_pdf)
            new_s = chain_s[hidx] @ ((md + ms) * inv_pdf)

        if depth >= cfg.rr_start:
            lum = np.clip(new_chain[:, :, 0, 0] @ LUMA, 0.1, 0.95)
            u_rr = stream_uniform(cfg.seed, stream, pixels[hidx], sample, depth, 3)
            survive = u_rr < lum
            boost = np.where(survive, 1.0 / lum, 0.0)[:, None, None, None]
            new_chain *= boost
            new_d *= boost
            new_s *= boost
            valid &= survive

        chain[hidx] = new_chain
        chain_d[hidx] = new_d
        chain_s[hidx] = new_s
        o_cur[hidx] = ph + RAY_OFFSET * nrm
        d_cur[hidx] = wi
        x_cur[hidx] = x_next
        alive[hidx] = valid
    if split:
        return out, out_d, out_s
    return out


# -- paired scalar reference ---------------------------------------------------------

def trace_sample_scalar(scene, origins, dirs, cfg, stream, pixels, sample):
    """Conventional scalar path tracer consuming the same RNG streams.

    Used as the independent oracle for the unpolarized-reduction check: with
    cfg.unpolarized the Mueller tracer must reproduce these s0 values.
    """
    n_rays = origins.shape[0]
    tp = np.ones((n_rays, 3))
    out = np.zeros((n_rays, 3))
    alive = np.ones(n_rays, dtype=bool)
    o_cur = np.array(origins, dtype=np.float64)
    d_cur = np.array(dirs, dtype=np.float64)
    bg = scene.background

    for depth in range(1, cfg.max_depth + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        t, hit, p, ids = ray_surface_hit(scene, o_cur[idx], d_cur[idx], t_max=cfg.t_max)
        miss_idx = idx[~hit]
        if miss_idx.size and np.any(bg > 0.0):
            add = tp[miss_idx] * bg
            add *= np.minimum(1.0, FIREFLY_S0 / np.maximum(add, 1e-12))
            np.add.at(out, miss_idx, add)
        alive[miss_idx] = False
        hidx = idx[hit]
        if hidx.size == 0:
            continue
        ph = p[hit]
        nrm = scene.normal(ph)
        wo = -d_cur[hidx]
        cos_o = np.sum(nrm * wo, -1)
        nrm = np.where((cos_o < 0.0)[:, None], -nrm, nrm)
        cos_o = np.abs(cos_o)
        mats = scene.materials_at(ph, ids[hit])
        if np.any(mats["emission"] > 0.0):
            add = tp[hidx] * mats["emission"]
            add *= np.minimum(1.0, FIREFLY_S0 / np.maximum(add, 1e-12))
            np.add.at(out, hidx, add)
        if depth == cfg.max_depth:
            alive[hidx] = False
            continue

        u_lobe = stream_uniform(cfg.seed, stream, pixels[hidx], sample, depth, 0)
        u1 = stream_uniform(cfg.seed, stream, pixels[hidx], sample, depth, 1)
        u2 = stream_uniform(cfg.seed, stream, pixels[hidx], sample, depth, 2)
        rough = mats["roughness"]
        wi_c = _cosine_sample(nrm, u1, u2)
        wi_v = _vndf_sample(nrm, wo, rough, u1, u2)
        wi = np.where((u_lobe < 0.5)[:, None], wi_c, wi_v)
        cos_i = np.sum(nrm * wi, -1)
        pdf = _mixture_pdf(nrm, wo, wi, rough)
        valid = (cos_i > 1e-6) & (cos_o > 1e-6) & (pdf > 1e-9)

        h = _normalize(wi + wo)
        cos_d = np.sum(wi * h, -1)
        ndh = np.sum(nrm * h, -1)
        # expression order mirrors the Mueller (0,0) entries so the RR
        # decisions of the ablated polarized tracer agree bit for bit
        a_i = fresnel_transmit_factors(np.clip(cos_i, COS_EPS, 1.0), mats["eta"], "into")[0]
        a_o = fresnel_transmit_factors(np.clip(cos_o, COS_EPS, 1.0), mats["eta"], "into")[0]
        f_dif = (mats["rho"] / np.pi * cos_i[:, None]) * (a_o * a_i)[:, None]
        d = ggx_d(ndh, rough)
        g = smith_g1(cos_i, rough) * smith_g1(cos_o, rough)
        fa = fresnel_reflect_factors(np.clip(cos_d, COS_EPS, 1.0), mats["eta"])[0]
        f_spec = (mats["k_s"] * (d * g / (4.0 * np.maximum(cos_o, COS_EPS)))[:, None]) * fa[:, None]
        inv_pdf = np.where(valid, 1.0 / np.maximum(pdf, 1e-12), 0.0)
        new_tp = tp[hidx] * ((f_dif + f_spec) * inv_pdf[:, None])

        if depth >= cfg.rr_start:
            lum = np.clip(new_tp @ LUMA, 0.1, 0.95)
            u_rr = stream_uniform(cfg.seed, stream, pixels[hidx], sample, depth, 3)
            survive = u_rr < lum
            new_tp *= np.where(survive, 1.0 / lum, 0.0)[:, None]
            valid &= survive

        tp[hidx] = new_tp
        o_cur[hidx] = ph + RAY_OFFSET * nrm
        d_cur[hidx] = wi
        alive[hidx] = valid
    return out


# -- public entry points ----------------------------------------------------------

def trace_camera_stokes(scene, pose, cfg, frame_roll=0.0, pixels=None, split=False):
    """Path-trace a camera view; Stokes are measured in per-pixel camera frames
    (x axis = camera right projected transverse, optionally rolled)."""
    all_px = np.arange(pose.height * pose.width)
    sel = all_px if pixels is None else np.asarray(pixels)
    acc = np.zeros((sel.size, 3, 3))
    acc_d = np.zeros_like(acc)
    acc_s = np.zeros_like(acc)
    for s in range(cfg.spp):
        jx = stream_uniform(cfg.seed, pose.view, sel, s, 0, 0)
        jy = stream_uniform(cfg.seed, pose.view, sel, s, 0, 1)
        jitter = np.zeros((pose.height * pose.width, 2))
        jitter[sel, 0] = jx
        jitter[sel, 1] = jy
        o, d = pixel_rays(pose, jitter=jitter)
        o, d = o[sel], d[sel]
        frame = measurement_frame(pose, d)
        x_axis = frame.rotated(frame_roll).x_axis if frame_roll != 0.0 else frame.x_axis
        m, md, ms = trace_sample(scene, o, d, x_axis, cfg, pose.view, sel, s, split=True)
        acc += m
        acc_d += md
        acc_s += ms
    acc /= cfg.spp
    acc_d /= cfg.spp
    acc_s /= cfg.spp
    if split:
        return acc, acc_d, acc_s
    return acc


def trace_camera_scalar(scene, pose, cfg):
    """Scalar-reference render of one pose, (H*W, C) radiance.

    Pixel jitter and all path decisions share the RNG streams of
    trace_camera_stokes, so it pairs with an unpolarized=True Stokes render.
    """
    sel = np.arange(pose.height * pose.width)
    acc = np.zeros((sel.size, 3))
    for s in range(cfg.spp):
        jitter = np.stack([stream_uniform(cfg.seed, pose.view, sel, s, 0, 0),
                           stream_uniform(cfg.seed, pose.view, sel, s, 0, 1)], axis=-1)
        o, d = pixel_rays(pose, jitter=jitter)
        acc += trace_sample_scalar(scene, o, d, cfg, pose.view, sel, s)
    return acc / cfg.spp


def trace_incident_rotated(scene, x, n, wi, wo, cfg, stream=PROBE_STREAM):
    """Ground-truth already-rotated incident Stokes at surface points x.

    Traces the light arriving from wi and returns it twice: rotated into the
    diffuse frame of the local normal, and into the specular frame of the
    halfway vector of (wi, wo).  Shapes (P,3) in, two (P,3,3) out.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
    wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
    h = _normalize(wi + wo)
    s_dif_axis = _plane_axis(wi, n)
    s_spec_axis = _plane_axis(wi, h)
    origins = x + RAY_OFFSET * n
    probes = np.arange(x.shape[0])
    acc = np.zeros((x.shape[0], 3, 3))
    for s in range(cfg.spp):
        acc += trace_sample(scene, origins, wi, s_dif_axis, cfg, stream, probes, s)
    s_dif = acc / cfg.spp
    phi = _rel_angle(-wi, s_dif_axis, s_spec_axis)
    s_spec = (_rot2(phi)[:, 0] @ s_dif)
    return s_dif, s_spec


def geometry_aovs(scene, pose, t_max=6.0):
    """First-hit AOVs from pixel-center rays: normal, albedo, roughness,
    object mask, and depth along the ray."""
    h, w = pose.height, pose.width
    o, d = pixel_rays(pose)
    t, hit, p, ids = ray_surface_hit(scene, o, d, t_max=t_max)
    normal = np.zeros((h * w, 3))
    if np.any(hit):
        normal[hit] = scene.normal(p[hit])
    mats = scene.materials_at(p, ids)
    mask = hit & mats["in_mask"]
    albedo = np.where(hit[:, None], mats["rho"], 0.0)
    roughness = np.where(hit, mats["roughness"], 0.0)
    return {"normal": normal.reshape(h, w, 3),
            "albedo": albedo.reshape(h, w, 3),
            "roughness": roughness.reshape(h, w),
            "mask": mask.reshape(h, w).astype(np.float32),
            "depth": np.where(hit, t, 0.0).reshape(h, w)}


def render_view(scene, pose, cfg, frame_roll=0.0):
    """Full render of one pose: Stokes image, lobe split, and geometry AOVs."""
    h, w = pose.height, pose.width
    stokes, dif, spec = trace_camera_stokes(scene, pose, cfg, frame_roll, split=True)
    out = geometry_aovs(scene, pose, t_max=cfg.t_max)
    out["stokes"] = stokes.reshape(h, w, 3, 3)
    out["diffuse"] = dif[:, 0, :].reshape(h, w, 3)
    out["specular"] = spec[:, 0, :].reshape(h, w, 3)
    return out


def render_dataset(scene, poses, cfg, out_dir, test_views=()):
    """Render all poses and write the dataset tree; deterministic per seed."""
    os.makedirs(out_dir, exist_ok=True)
    formats.save_poses(os.path.join(out_dir, "poses.json"), poses)
    from .scene import save_scene
    save_scene(scene, os.path.join(out_dir, "scene.json"))
    for pose in poses:
        view = pose.view
        out = render_view(scene, pose, cfg)
        formats.write_pstk(os.path.join(out_dir, f"view_{view:04d}.pstk"), out["stokes"])
        formats.save_stokes_pfm(out_dir, view, out["stokes"])
        formats.write_pfm(os.path.join(out_dir, f"{view:04d}_mask.pfm"), out["mask"])
        formats.write_pfm(os.path.join(out_dir, f"{view:04d}_normal.pfm"), out["normal"])
        formats.write_pfm(os.path.join(out_dir, f"{view:04d}_albedo.pfm"), out["albedo"])
        formats.write_pfm(os.path.join(out_dir, f"{view:04d}_roughness.pfm"), out["roughness"])
        formats.write_pfm(os.path.join(out_dir, f"{view:04d}_diffuse.pfm"), out["diffuse"])
        formats.write_pfm(os.path.join(out_dir, f"{view:04d}_specular.pfm"), out["specular"])
    meta = {"n_views": len(poses),
            "width": poses[0].width, "height": poses[0].height,
            "test_views": sorted(int(v) for v in test_views),
            "train_views": [p.view for p in poses if p.view not in set(test_views)],
            "spp": cfg.spp, "max_depth": cfg.max_depth, "seed": cfg.seed,
            "unpolarized": cfg.unpolarized}
    with open(os.path.join(out_dir, "dataset.json"), "w") as f:
        json.dump(meta, f, indent=2)
    return meta

"""Polarimetric BRDF: Fresnel Mueller matrices, GGX microfacets, and the
diffuse / specular Mueller matrices of the dielectric pBRDF.

The diffuse lobe is transmission in, ideal depolarization by subsurface
scattering, transmission out:

    M_dif = (rho / pi) cos_theta_i * F_T(out) . D . F_T(in),   D = diag(1,0,0)

The specular lobe is microfacet mirror reflection:

    M_spec = k_s * D_ggx * G / (4 cos_theta_o) * F_R(cos_theta_d)

Both matrices absorb the rendering cosine, so a renderer just sums
M . s_in over incident directions.

All scalar formulas accept plain ndarrays or autodiff Vars (see ops.py).
Reference frames follow polcore: the x axis of every Fresnel interaction
frame is the s direction, i.e. the normal of the plane of incidence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .polcore import MuellerMatrix, ReferenceFrame, canonical_x_axis

R_MIN = 0.01          # roughness floor: keeps GGX integrable by fixed quadrature
COS_EPS = 1e-4        # grazing clamp for cosine denominators
DEGEN_EPS = 1e-8      # transverse-projection threshold for frame fallbacks


@dataclass(frozen=True)
class PbrdfParams:
    """Per-point material. rho in [0,1]^3, roughness in [R_MIN, 1], eta > 1."""

    rho: np.ndarray
    roughness: np.ndarray
    k_s: np.ndarray = field(default_factory=lambda: np.ones(3))
    eta: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "rho", np.clip(np.asarray(self.rho, dtype=np.float64), 0.0, 1.0))
        object.__setattr__(self, "roughness", np.clip(np.asarray(self.roughness, dtype=np.float64), R_MIN, 1.0))
        object.__setattr__(self, "k_s", np.asarray(self.k_s, dtype=np.float64))
        if not self.eta > 1.0:
            raise ValueError("refractive index must exceed 1")


@dataclass(frozen=True)
class ShadingGeometry:
    """Unit vectors of one surface interaction; wi and wo point away from it."""

    n: np.ndarray
    wi: np.ndarray
    wo: np.ndarray
    h: np.ndarray

    @staticmethod
    def from_directions(n, wi, wo):
        n = np.asarray(n, dtype=np.float64)
        wi = np.asarray(wi, dtype=np.float64)
        wo = np.asarray(wo, dtype=np.float64)
        h = ops.normalize(wi + wo, eps=DEGEN_EPS)
        return ShadingGeometry(n, wi, wo, h)

    @property
    def cos_i(self):
        return np.sum(self.n * self.wi, axis=-1)

    @property
    def cos_o(self):
        return np.sum(self.n * self.wo, axis=-1)

    @property
    def cos_d(self):
        return np.sum(self.wi * self.h, axis=-1)

    @property
    def n_dot_h(self):
        return np.sum(self.n * self.h, axis=-1)


# -- Fresnel ------------------------------------------------------------

def fresnel_reflect_factors(cos_i, eta):
    """Mueller elements (A, B, C) of dielectric reflection.

    A = (R_s + R_p)/2, B = (R_s - R_p)/2, C = r_s r_p (the signed amplitude
    product carries the reflection phase, so C = sqrt(R_s R_p) cos(delta)).
    External reflection only; no critical angle exists for eta > 1.
    """
    s2 = ops.maximum(1.0 - cos_i * cos_i, 0.0)
    cos_t = ops.sqrt(ops.maximum(1.0 - s2 / (eta * eta), 0.0))
    rs = (cos_i - eta * cos_t) / (cos_i + eta * cos_t)
    rp = (eta * cos_i - cos_t) / (eta * cos_i + cos_t)
    a = 0.5 * (rs * rs + rp * rp)
    b = 0.5 * (rs * rs - rp * rp)
    return a, b, rs * rp


def fresnel_transmit_factors(cos_i, eta, direction="into"):
    """Mueller elements (A, B, C) of dielectric transmission, plus a TIR mask.

    Energy transmittances include the (eta_t cos_t)/(eta_i cos_i) radiometric
    factor, so A is the unpolarized Fresnel transmittance and T + R = 1 per
    polarization.  direction "into" enters the medium (relative index eta),
    "out_of" leaves it (relative index 1/eta, total internal reflection
    possible); TIR entries are zeroed and flagged.
    """
    rel = eta if direction == "into" else 1.0 / eta
    s2 = ops.maximum(1.0 - cos_i * cos_i, 0.0)
    sin_t2 = s2 / (rel * rel)
    tir = ops.raw(sin_t2) >= 1.0
    cos_t = ops.sqrt(ops.maximum(1.0 - sin_t2, 0.0))
    ts = 2.0 * cos_i / (cos_i + rel * cos_t)
    tp = 2.0 * cos_i / (rel * cos_i + cos_t)
    factor = rel * cos_t / ops.maximum(cos_i, COS_EPS)
    t_s = factor * ts * ts
    t_p = factor * tp * tp
    a = ops.where(tir, 0.0, 0.5 * (t_s + t_p))
    b = ops.where(tir, 0.0, 0.5 * (t_s - t_p))
    c = ops.where(tir, 0.0, ops.sqrt(ops.maximum(t_s * t_p, 0.0)))
    return a, b, c, tir


def _fresnel_matrix(a, b, c):
    """Assemble [[a,b,0],[b,a,0],[0,0,c]] with a trailing RGB axis."""
    a = np.asarray(a, dtype=np.float64)
    zero = np.zeros_like(a)
    m = np.stack([np.stack([a, b, zero], axis=-1),
                  np.stack([b, a, zero], axis=-1),
                  np.stack([zero, zero, c], axis=-1)], axis=-2)
    return np.repeat(m[..., None], 3, axis=-1)


def fresnel_reflect_mueller(cos_theta, eta, frame_in, frame_out):
    """Dielectric reflection Mueller matrix; frames supplied by the caller
    must share the s axis of the plane of incidence."""
    a, b, c = fresnel_reflect_factors(np.asarray(cos_theta, dtype=np.float64), eta)
    return MuellerMatrix(_fresnel_matrix(a, b, c), frame_in, frame_out)


def fresnel_transmit_mueller(cos_theta, eta, direction, frame_in, frame_out):
    """Dielectric transmission Mueller matrix and TIR flag (matrix is zero
    wherever the flag is set)."""
    a, b, c, tir = fresnel_transmit_factors(np.asarray(cos_theta, dtype=np.float64), eta, direction)
    return MuellerMatrix(_fresnel_matrix(a, b, c), frame_in, frame_out), tir


# -- microfacets ----------------------------------------------------------

def ggx_d(n_dot_h, roughness):
    """GGX normal distribution with alpha = roughness^2; 0 for backfacing h."""
    alpha = roughness * roughness
    a2 = alpha * alpha
    c = ops.maximum(n_dot_h, 0.0)
    denom = c * c * (a2 - 1.0) + 1.0
    d = a2 / (np.pi * denom * denom)
    return ops.where(ops.raw(n_dot_h) > 0.0, d, 0.0)


def smith_g1(cos_v, roughness):
    """Smith masking for GGX, one direction."""
    alpha = roughness * roughness
    a2 = alpha * alpha
    c = ops.clip(cos_v, COS_EPS, 1.0)
    return 2.0 * c / (c + ops.sqrt(a2 + (1.0 - a2) * c * c))


def smith_g(geom, roughness):
    """Separable Smith shadowing-masking G1(wi) G1(wo)."""
    return smith_g1(geom.cos_i, roughness) * smith_g1(geom.cos_o, roughness)


# -- interaction frames ---------------------------------------------------

def _s_axis(w, ref):
    """Unit normal of the plane spanned by w and ref (transverse to w);
    falls back to a fixed perpendicular when the plane degenerates."""
    u = np.cross(w, ref)
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    fallback = canonical_x_axis(w)
    ok = n > DEGEN_EPS
    return np.where(ok, u / np.where(ok, n, 1.0), fallback)


def diffuse_frames(n, wi, wo):
    """(frame_in, frame_out) of the diffuse lobe: planes of incidence through
    the surface normal."""
    s_i = _s_axis(wi, n)
    s_o = _s_axis(wo, n)
    return ReferenceFrame(-wi, s_i), ReferenceFrame(wo, s_o)


def specular_frames(wi, wo, h):
    """(frame_in, frame_out) of the specular lobe: the shared s axis of the
    (wi, wo, h) plane of incidence through the microfacet normal."""
    s_h = _s_axis(wi, h)
    return ReferenceFrame(-wi, s_h), ReferenceFrame(wo, s_h)


# -- pBRDF Mueller matrices ------------------------------------------------

def diffuse_mueller(params, geom):
    """Diffuse pBRDF Mueller matrix (per channel), with plane-of-incidence
    frames.  The depolarizer collapses the sandwich to the rank-1 form
    M[i][j] = c * a_i * b_j with a, b the exit/entry Fresnel vectors."""
    cos_i = np.clip(geom.cos_i, COS_EPS, 1.0)
    cos_o = np.clip(geom.cos_o, COS_EPS, 1.0)
    a_i, b_i, _, _ = fresnel_transmit_factors(cos_i, params.eta, "into")
    a_o, b_o, _, _ = fresnel_transmit_factors(cos_o, params.eta, "into")
    zero = np.zeros_like(a_i)
    entry = np.stack([a_i, b_i, zero], axis=-1)   # row of F_T(in) kept by D
    exit_ = np.stack([a_o, b_o, zero], axis=-1)   # column of F_T(out) fed by D
    c = (params.rho / np.pi) * cos_i[..., None]   # (..., 3 rgb)
    m = exit_[..., :, None, None] * entry[..., None, :, None] * c[..., None, None, :]
    f_in, f_out = diffuse_frames(geom.n, geom.wi, geom.wo)
    return MuellerMatrix(m, f_in, f_out)


def specular_mueller(params, geom):
    """Specular pBRDF Mueller matrix (per channel), framed on the microfacet
    plane of incidence."""
    cos_o = np.clip(geom.cos_o, COS_EPS, 1.0)
    d = ggx_d(geom.n_dot_h, params.roughness)
    g = smith_g(geom, params.roughness)
    cos_d = np.clip(geom.cos_d, COS_EPS, 1.0)
    a, b, c = fresnel_reflect_factors(cos_d, params.eta)
    scale = d * g / (4.0 * cos_o)
    m = _fresnel_matrix(a * scale, b * scale, c * scale) * params.k_s[..., None, None, :]
    f_in, f_out = specular_frames(geom.wi, geom.wo, geom.h)
    return MuellerMatrix(m, f_in, f_out)

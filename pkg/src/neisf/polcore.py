"""Stokes vector and Mueller matrix algebra with reference-frame bookkeeping.

Conventions (fixed here, used by both the ground-truth tracer and the
differentiable renderer so the two sides always agree):

* A reference frame is (propagation w, x_axis e) with e transverse to w.
  The implied y axis is cross(w, e), making (e, y, w) right-handed.
* s = [s0, s1, s2]: total intensity, 0/90 degree balance along (e, y),
  45/135 degree balance.  No circular component.
* Rotating a frame by +phi turns e toward y when looking along w
  (right-handed about the propagation axis).  The same physical light
  re-expressed in the rotated frame transforms with

      R(phi) = [[1, 0, 0], [0, cos 2phi, sin 2phi], [0, -sin 2phi, cos 2phi]]

* Stokes values and Mueller matrices carry a trailing RGB axis:
  s has shape (..., 3 components, 3 channels) and M has shape
  (..., 3, 3, 3 channels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FRAME_TOL = 1e-9


class FrameMismatch(ValueError):
    """Mueller application with disagreeing reference frames: a physics bug."""


class PropagationMismatch(ValueError):
    """Relative frame rotation requested between different propagation axes."""


def _unit(v, tol=FRAME_TOL):
    n = np.linalg.norm(v, axis=-1)
    if not np.allclose(n, 1.0, atol=tol):
        raise ValueError(f"expected unit vectors, got norms in [{n.min()}, {n.max()}]")
    return v


@dataclass(frozen=True)
class ReferenceFrame:
    """Transverse basis for Stokes components: propagation + x axis."""

    propagation: np.ndarray  # (..., 3) unit
    x_axis: np.ndarray       # (..., 3) unit, orthogonal to propagation

    def __post_init__(self):
        object.__setattr__(self, "propagation", np.asarray(self.propagation, dtype=np.float64))
        object.__setattr__(self, "x_axis", np.asarray(self.x_axis, dtype=np.float64))

    def validate(self):
        _unit(self.propagation)
        _unit(self.x_axis)
        d = np.abs(np.sum(self.propagation * self.x_axis, axis=-1))
        if not np.all(d <= FRAME_TOL):
            raise ValueError(f"x_axis not transverse to propagation (max |dot| = {d.max()})")
        return self

    @property
    def y_axis(self):
        return np.cross(self.propagation, self.x_axis)

    def rotated(self, phi):
        """Frame with x_axis turned by +phi about propagation."""
        phi = np.asarray(phi)[..., None]
        x = np.cos(phi) * self.x_axis + np.sin(phi) * self.y_axis
        return ReferenceFrame(self.propagation, x)


def canonical_x_axis(direction):
    """Deterministic transverse x axis for a propagation direction.

    Branchless orthonormal basis of Duff et al., so nearby directions get
    nearby frames almost everywhere.
    """
    d = np.asarray(direction, dtype=np.float64)
    sign = np.where(d[..., 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + d[..., 2])
    b = d[..., 0] * d[..., 1] * a
    x = np.stack([1.0 + sign * d[..., 0] * d[..., 0] * a,
                  sign * b,
                  -sign * d[..., 0]], axis=-1)
    return x


def canonical_frame(direction):
    return ReferenceFrame(np.asarray(direction, dtype=np.float64), canonical_x_axis(direction))


def frames_match(f1, f2, tol=FRAME_TOL):
    """True when both axes agree within an angular tolerance (small-angle)."""
    if f1 is f2:
        return True
    dp = np.abs(f1.propagation - f2.propagation).max()
    dx = np.abs(f1.x_axis - f2.x_axis).max()
    return bool(dp <= tol and dx <= tol)


@dataclass(frozen=True)
class FramedStokes:
    """Stokes components (..., 3, 3 rgb) tagged with their reference frame."""

    s: np.ndarray
    frame: ReferenceFrame

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=np.float64))

    @staticmethod
    def from_vector(vec, frame):
        """Replicate one [s0, s1, s2] across the RGB channels."""
        v = np.asarray(vec, dtype=np.float64)
        return FramedStokes(np.repeat(v[..., :, None], 3, axis=-1), frame)

    @property
    def s0(self):
        return self.s[..., 0, :]

    def validate_physical(self, tol=1e-6):
        """Physically generated light: s0 >= 0 and DoLP <= 1."""
        if np.any(self.s0 < 0):
            raise ValueError("negative s0 in physical Stokes vector")
        lin = np.sqrt(self.s[..., 1, :] ** 2 + self.s[..., 2, :] ** 2)
        if np.any(lin > self.s0 * (1.0 + tol) + 1e-12):
            raise ValueError("DoLP exceeds 1 in physical Stokes vector")
        return self


@dataclass(frozen=True)
class MuellerMatrix:
    """Per-channel 3x3 Mueller matrix with declared input/output frames."""

    m: np.ndarray  # (..., 3, 3, 3 rgb)
    frame_in: ReferenceFrame
    frame_out: ReferenceFrame

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=np.float64))

    @staticmethod
    def from_matrix(mat, frame_in, frame_out):
        """Replicate one achromatic 3x3 across the RGB channels."""
        m = np.asarray(mat, dtype=np.float64)
        return MuellerMatrix(np.repeat(m[..., :, :, None], 3, axis=-1), frame_in, frame_out)


def rotation_matrix_2phi(phi):
    """The achromatic R(phi) block, shape phi.shape + (3, 3)."""
    phi = np.asarray(phi, dtype=np.float64)
    c = np.cos(2.0 * phi)
    s = np.sin(2.0 * phi)
    one = np.ones_like(c)
    zero = np.zeros_like(c)
    rows = [np.stack([one, zero, zero], axis=-1),
            np.stack([zero, c, s], axis=-1),
            np.stack([zero, -s, c], axis=-1)]
    return np.stack(rows, axis=-2)


def rotator(phi, frame_in):
    """Frame-rotation Mueller matrix by +phi about the propagation axis."""
    return MuellerMatrix.from_matrix(rotation_matrix_2phi(phi), frame_in, frame_in.rotated(phi))


def mueller_apply(M, s):
    """s_out = M s, rejecting mismatched frames instead of silently rotating."""
    if not frames_match(M.frame_in, s.frame):
        raise FrameMismatch("Stokes frame does not match Mueller input frame")
    out = np.einsum("...ijc,...jc->...ic", M.m, s.s)
    return FramedStokes(out, M.frame_out)


def mueller_compose(M2, M1):
    """The matrix of applying M1 then M2."""
    if not frames_match(M2.frame_in, M1.frame_out):
        raise FrameMismatch("inner frames disagree in Mueller composition")
    m = np.einsum("...ijc,...jkc->...ikc", M2.m, M1.m)
    return MuellerMatrix(m, M1.frame_in, M2.frame_out)


def relative_rotation_angle(frame_from, frame_to, tol=1e-6):
    """Signed phi with rotator(phi, frame_from).frame_out == frame_to."""
    d = np.sum(frame_from.propagation * frame_to.propagation, axis=-1)
    if not np.all(d > 1.0 - tol):
        raise PropagationMismatch(f"propagation axes differ (min dot = {np.min(d)})")
    cosphi = np.sum(frame_from.x_axis * frame_to.x_axis, axis=-1)
    sinphi = np.sum(frame_from.y_axis * frame_to.x_axis, axis=-1)
    return np.arctan2(sinphi, cosphi)


def dolp(s):
    """Degree of linear polarization per channel, with validity flag.

    Returns (dolp, valid); entries with s0 <= 0 get dolp 0 and valid False.
    """
    st = s.s if isinstance(s, FramedStokes) else np.asarray(s)
    s0 = st[..., 0, :]
    lin = np.sqrt(st[..., 1, :] ** 2 + st[..., 2, :] ** 2)
    valid = s0 > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(valid, lin / np.where(valid, s0, 1.0), 0.0)
    return np.clip(d, 0.0, 1.0 + 1e-6), valid


def aolp(s):
    """Angle of linear polarization, 0.5 atan2(s2, s1) in (-pi/2, pi/2].

    Returns (aolp, valid); entries with s1 = s2 = 0 get angle 0 and valid False.
    """
    st = s.s if isinstance(s, FramedStokes) else np.asarray(s)
    s1 = st[..., 1, :]
    s2 = st[..., 2, :]
    valid = (s1 != 0.0) | (s2 != 0.0)
    ang = 0.5 * np.arctan2(s2, s1)
    return np.where(valid, ang, 0.0), valid

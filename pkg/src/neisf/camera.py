"""Pinhole cameras: pose construction, per-pixel rays, measurement frames.

Camera space is OpenCV-style: +x right, +y down, +z forward, so K projects
as u = fx X/Z + cx.  A polarimetric pixel measures the Stokes vector of
light arriving along -ray_dir; its reference frame x axis is the camera
right axis projected into the transverse plane of that propagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .polcore import ReferenceFrame


@dataclass(frozen=True)
class CameraPose:
    view: int
    width: int
    height: int
    k: np.ndarray            # 3x3 intrinsics
    cam_to_world: np.ndarray  # 4x4

    @property
    def position(self):
        return self.cam_to_world[:3, 3]

    @property
    def rotation(self):
        return self.cam_to_world[:3, :3]


def intrinsics(width, height, fov_x_deg):
    f = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_x_deg))
    return np.array([[f, 0.0, 0.5 * width],
                     [0.0, f, 0.5 * height],
                     [0.0, 0.0, 1.0]])


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """cam_to_world with +z toward target, +y screen-down."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(forward, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, forward, eye
    return m


def pixel_rays(pose, jitter=None):
    """World-space rays through all pixels, row-major.

    jitter is an optional (H*W, 2) offset in [0,1); None uses pixel centers.
    Returns (origins, dirs), both (H*W, 3), dirs unit length.
    """
    h, w = pose.height, pose.width
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    uv = np.stack([u.ravel(), v.ravel()], axis=-1)
    uv += 0.5 if jitter is None else jitter
    fx, fy = pose.k[0, 0], pose.k[1, 1]
    cx, cy = pose.k[0, 2], pose.k[1, 2]
    d_cam = np.stack([(uv[:, 0] - cx) / fx, (uv[:, 1] - cy) / fy, np.ones(uv.shape[0])], axis=-1)
    d_world = d_cam @ pose.rotation.T
    d_world = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position, d_world.shape).copy()
    return origins, d_world


def measurement_frame(pose, dirs):
    """Stokes frame of light arriving at the camera along rays cast as dirs:
    propagation -dirs, x axis = camera right projected transverse."""
    prop = -np.asarray(dirs, dtype=np.float64)
    right = np.broadcast_to(pose.rotation[:, 0], prop.shape)
    x = right - np.sum(right * prop, axis=-1, keepdims=True) * prop
    x = x / np.linalg.norm(x, axis=-1, keepdims=True)
    return ReferenceFrame(prop, x)


def orbit_rig(n_views, width, height, fov_x_deg=70.0, radius=0.9,
              target=(0.0, -0.5, 0.0), azim_deg=(-48.0, 48.0), elev_deg=(2.0, 32.0)):
    """Deterministic arc of inward-looking cameras on a spherical cap.

    Azimuth sweeps the range uniformly; elevation zigzags so neighboring
    views differ in both angles.  Azimuth 0 faces +z.
    """
    target = np.asarray(target, dtype=np.float64)
    k = intrinsics(width, height, fov_x_deg)
    poses = []
    for i in range(n_views):
        fa = i / max(n_views - 1, 1)
        fe = 0.5 - 0.5 * np.cos(2.0 * np.pi * ((i * 3) % n_views) / max(n_views, 1))
        az = np.deg2rad(azim_deg[0] + fa * (azim_deg[1] - azim_deg[0]))
        el = np.deg2rad(elev_deg[0] + fe * (elev_deg[1] - elev_deg[0]))
        pos = target + radius * np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
        poses.append(CameraPose(i, width, height, k, look_at(pos, target)))
    return poses

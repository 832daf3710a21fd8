"""File I/O: PFM images, the 9-plane Stokes container, checkpoints, poses.

PFM follows the usual convention: 'Pf' gray / 'PF' color, ASCII header,
negative scale for little-endian, rows stored bottom to top.

The Stokes container ("PSTK") packs one view's 9 planes (s0..s2 x r,g,b)
as float32 after a fixed 64-byte header, rows top to bottom.  Checkpoints
("NSFC") store named lists of float32 arrays plus float64 scalars with a
bit-exact round-trip.
"""

from __future__ import annotations

import csv
import json
import os
import struct

import numpy as np

from .camera import CameraPose

STOKES_NAMES = ("s0", "s1", "s2")
CHANNEL_NAMES = ("r", "g", "b")


class FormatError(ValueError):
    """Unreadable or inconsistent file contents."""


# -- PFM ------------------------------------------------------------------

def write_pfm(path, data):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise FormatError(f"PFM needs (H,W) or (H,W,3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n%d %d\n-1.0\n" % (w, h))
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise FormatError(f"not a PFM file: {path}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError(f"bad PFM dimension line in {path}")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        channels = 3 if header == b"PF" else 1
        count = w * h * channels
        dtype = "<f4" if scale < 0 else ">f4"
        buf = f.read(count * 4)
        if len(buf) != count * 4:
            raise FormatError(f"truncated PFM payload in {path}")
        raw = np.frombuffer(buf, dtype=dtype)
    img = raw.reshape(h, w, channels) if channels == 3 else raw.reshape(h, w)
    return np.flipud(img).astype(np.float32)


def stokes_pfm_name(view, stokes, channel):
    return f"{view:04d}_{stokes}_{channel}.pfm"


def save_stokes_pfm(dirpath, view, s):
    """Write one view's Stokes image (H,W,3,3) as 9 single-plane PFM files."""
    s = np.asarray(s)
    for i, sn in enumerate(STOKES_NAMES):
        for c, cn in enumerate(CHANNEL_NAMES):
            write_pfm(os.path.join(dirpath, stokes_pfm_name(view, sn, cn)), s[..., i, c])


def load_stokes_pfm(dirpath, view):
    planes = []
    for sn in STOKES_NAMES:
        for cn in CHANNEL_NAMES:
            planes.append(read_pfm(os.path.join(dirpath, stokes_pfm_name(view, sn, cn))))
    h, w = planes[0].shape
    return np.stack(planes, axis=-1).reshape(h, w, 3, 3)


# -- PSTK container ---------------------------------------------------------

_PSTK_MAGIC = b"PSTK"
_PSTK_VERSION = 1
_PSTK_HEADER = struct.Struct("<4sIIII")   # magic, version, width, height, planes


def write_pstk(path, s):
    """s: (H, W, 3 stokes, 3 rgb) -> 9 planes s0_r, s0_g, s0_b, s1_r, ..."""
    s = np.asarray(s, dtype=np.float32)
    if s.ndim != 4 or s.shape[2:] != (3, 3):
        raise FormatError(f"PSTK needs (H,W,3,3), got {s.shape}")
    h, w = s.shape[:2]
    header = _PSTK_HEADER.pack(_PSTK_MAGIC, _PSTK_VERSION, w, h, 9)
    planes = np.moveaxis(s.reshape(h, w, 9), -1, 0)
    with open(path, "wb") as f:
        f.write(header.ljust(64, b"\0"))
        f.write(np.ascontiguousarray(planes, dtype="<f4").tobytes())


def read_pstk(path):
    with open(path, "rb") as f:
        head = f.read(64)
        if len(head) < 64:
            raise FormatError(f"truncated PSTK header in {path}")
        magic, version, w, h, n_planes = _PSTK_HEADER.unpack_from(head)
        if magic != _PSTK_MAGIC:
            raise FormatError(f"not a PSTK file: {path}")
        if version != _PSTK_VERSION:
            raise FormatError(f"unsupported PSTK version {version}")
        if n_planes != 9:
            raise FormatError(f"expected 9 planes, got {n_planes}")
        count = 9 * h * w
        buf = f.read(count * 4)
        if len(buf) != count * 4:
            raise FormatError(f"truncated PSTK payload in {path}")
        raw = np.frombuffer(buf, dtype="<f4")
    return np.moveaxis(raw.reshape(9, h, w), 0, -1).reshape(h, w, 3, 3).astype(np.float32)


# -- NSFC checkpoints ---------------------------------------------------------

_NSFC_MAGIC = b"NSFC"
_NSFC_VERSION = 1


def save_checkpoint(path, scalars, networks):
    """scalars: {name: float}; networks: {name: [float32 arrays]} (ordered)."""
    with open(path, "wb") as f:
        f.write(_NSFC_MAGIC)
        f.write(struct.pack("<I", _NSFC_VERSION))
        f.write(struct.pack("<I", len(scalars)))
        for k, v in scalars.items():
            kb = k.encode()
            f.write(struct.pack("<H", len(kb)) + kb + struct.pack("<d", float(v)))
        f.write(struct.pack("<I", len(networks)))
        payload = []
        for name, arrays in networks.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<I", len(arrays)))
            for a in arrays:
                a = np.asarray(a, dtype="<f4")
                f.write(struct.pack("<B", a.ndim))
                for dim in a.shape:
                    f.write(struct.pack("<I", dim))
                payload.append(a)
        for a in payload:
            f.write(a.tobytes())   # tobytes always emits C order


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != _NSFC_MAGIC:
            raise FormatError(f"not an NSFC checkpoint: {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _NSFC_VERSION:
            raise FormatError(f"unsupported NSFC version {version}")
        (n_scalars,) = struct.unpack("<I", f.read(4))
        scalars = {}
        for _ in range(n_scalars):
            (klen,) = struct.unpack("<H", f.read(2))
            k = f.read(klen).decode()
            (scalars[k],) = struct.unpack("<d", f.read(8))
        (n_nets,) = struct.unpack("<I", f.read(4))
        shapes = []
        for _ in range(n_nets):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (n_arrays,) = struct.unpack("<I", f.read(4))
            dims = []
            for _ in range(n_arrays):
                (ndim,) = struct.unpack("<B", f.read(1))
                dims.append(struct.unpack("<%dI" % ndim, f.read(4 * ndim)))
            shapes.append((name, dims))
        networks = {}
        for name, dims in shapes:
            arrays = []
            for shape in dims:
                count = int(np.prod(shape)) if shape else 1
                buf = f.read(count * 4)
                if len(buf) != count * 4:
                    raise FormatError(f"truncated NSFC payload in {path}")
                arrays.append(np.frombuffer(buf, dtype="<f4").reshape(shape).copy())
            networks[name] = arrays
    return scalars, networks


# -- poses ---------------------------------------------------------------------

def save_poses(path, poses):
    data = [{"view": p.view, "width": p.width, "height": p.height,
             "K": p.k.tolist(), "cam_to_world": p.cam_to_world.tolist()} for p in poses]
    with open(path, "w") as f:
        json.dump(data, f, indent=2)


def load_poses(path):
    with open(path, "r") as f:
        data = json.load(f)
    try:
        return [CameraPose(int(d["view"]), int(d["width"]), int(d["height"]),
                           np.asarray(d["K"], dtype=np.float64),
                           np.asarray(d["cam_to_world"], dtype=np.float64)) for d in data]
    except KeyError as e:
        raise FormatError(f"missing pose field {e.args[0]!r}") from None


# -- angle-image interop ----------------------------------------------------------

def stokes_from_angle_images(i0, i45, i90, i135):
    """Four linear-polarizer intensities -> (s0, s1, s2) stacked on a new last axis."""
    s0 = 0.5 * (i0 + i45 + i90 + i135)
    return np.stack([s0, i0 - i90, i45 - i135], axis=-1)


def angle_images_from_stokes(s):
    """Inverse of stokes_from_angle_images; returns (i0, i45, i90, i135)."""
    s0, s1, s2 = s[..., 0], s[..., 1], s[..., 2]
    return 0.5 * (s0 + s1), 0.5 * (s0 + s2), 0.5 * (s0 - s1), 0.5 * (s0 - s2)


# -- run logs ----------------------------------------------------------------------

def append_csv_row(path, header, row):
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if fresh:
            writer.writerow(header)
        writer.writerow(row)

"""File formats: the raw frame container and PLY point-cloud export.

Frame container layout (little-endian): magic "OMSF", version u16, frame
count u32; per frame: agent i32, t i32, pose rows 12xf64, intrinsics 4xf64,
height u32, width u32, flags u8 (bit 0: corrupted masks present), rgb f32,
depth f64, gt masks i32, corrupted masks i32 when flagged.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedBufferError, VersionMismatchError
from .geometry import Intrinsics
from .scene import FrameBundle

FRAMES_MAGIC = b"OMSF"
FRAMES_VERSION = 1
_FILE_HEADER = struct.Struct("<4sHI")
_FRAME_HEADER = struct.Struct("<ii12d4dIIB")


def write_frames(path: str | Path, frames: list[FrameBundle]) -> None:
    with open(path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(FRAMES_MAGIC, FRAMES_VERSION, len(frames)))
        for f in frames:
            h, w = f.shape
            flags = 1 if f.corrupted_masks is not None else 0
            fh.write(_FRAME_HEADER.pack(
                f.agent_id, f.t, *f.pose[:3, :4].ravel().tolist(),
                f.intrinsics.fx, f.intrinsics.fy, f.intrinsics.cx, f.intrinsics.cy,
                h, w, flags))
            fh.write(f.rgb.astype("<f4").tobytes())
            fh.write(f.depth.astype("<f8").tobytes())
            fh.write(f.gt_masks.astype("<i4").tobytes())
            if flags & 1:
                fh.write(f.corrupted_masks.astype("<i4").tobytes())


def read_frames(path: str | Path) -> list[FrameBundle]:
    buf = Path(path).read_bytes()
    if len(buf) < _FILE_HEADER.size:
        raise TruncatedBufferError("frame container shorter than its header")
    magic, version, count = _FILE_HEADER.unpack_from(buf)
    if magic != FRAMES_MAGIC:
        raise BadMagicError(f"expected {FRAMES_MAGIC!r}")
    if version != FRAMES_VERSION:
        raise VersionMismatchError(f"frame container version {version}")
    off = _FILE_HEADER.size
    frames = []
    for _ in range(count):
        if len(buf) < off + _FRAME_HEADER.size:
            raise TruncatedBufferError("frame header truncated")
        agent_id, t, *rest = _FRAME_HEADER.unpack_from(buf, off)
        off += _FRAME_HEADER.size
        pose = np.eye(4)
        pose[:3, :4] = np.array(rest[:12]).reshape(3, 4)
        intr = Intrinsics(*rest[12:16])
        h, w, flags = rest[16], rest[17], rest[18]

        def take(dtype: str, n: int, shape) -> np.ndarray:
            nonlocal off
            itemsize = np.dtype(dtype).itemsize
            if len(buf) < off + n * itemsize:
                raise TruncatedBufferError("frame arrays truncated")
            arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(shape)
            off += n * itemsize
            return arr

        rgb = take("<f4", h * w * 3, (h, w, 3)).astype(np.float64)
        depth = take("<f8", h * w, (h, w)).copy()
        gt = take("<i4", h * w, (h, w)).copy()
        corrupted = take("<i4", h * w, (h, w)).copy() if flags & 1 else None
        frames.append(FrameBundle(agent_id=agent_id, t=t, pose=pose, intrinsics=intr,
                                  rgb=rgb, depth=depth, gt_masks=gt,
                                  corrupted_masks=corrupted))
    return frames


def write_ply(path: str | Path, points: np.ndarray,
              instance_ids: np.ndarray | None = None,
              class_ids: np.ndarray | None = None,
              binary: bool = True) -> None:
    """Point cloud as PLY with optional per-vertex id properties."""
    n = len(points)
    props = ["property double x", "property double y", "property double z"]
    if instance_ids is not None:
        props.append("property int instance_id")
    if class_ids is not None:
        props.append("property int class_id")
    fmt = "binary_little_endian 1.0" if binary else "ascii 1.0"
    header = "\n".join([
        "ply", f"format {fmt}", f"element vertex {n}", *props, "end_header", ""])

    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            row_dtype = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if instance_ids is not None:
                row_dtype.append(("instance_id", "<i4"))
            if class_ids is not None:
                row_dtype.append(("class_id", "<i4"))
            rows = np.empty(n, dtype=row_dtype)
            rows["x"], rows["y"], rows["z"] = points[:, 0], points[:, 1], points[:, 2]
            if instance_ids is not None:
                rows["instance_id"] = instance_ids
            if class_ids is not None:
                rows["class_id"] = class_ids
            fh.write(rows.tobytes())
        else:
            lines = []
            for i in range(n):
                cols = [f"{points[i, 0]:.9g}", f"{points[i, 1]:.9g}", f"{points[i, 2]:.9g}"]
                if instance_ids is not None:
                    cols.append(str(int(instance_ids[i])))
                if class_ids is not None:
                    cols.append(str(int(class_ids[i])))
                lines.append(" ".join(cols))
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def read_ply_points(path: str | Path) -> np.ndarray:
    """Read back x/y/z from a PLY written by write_ply (both formats)."""
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"end_header\n")
    lines = head.decode("ascii").splitlines()
    n = next(int(l.split()[-1]) for l in lines if l.startswith("element vertex"))
    binary = any("binary_little_endian" in l for l in lines)
    props = [l.split()[2] for l in lines if l.startswith("property")]
    if binary:
        dtype = []
        for name in props:
            dtype.append((name, "<f8" if name in ("x", "y", "z") else "<i4"))
        rows = np.frombuffer(body, dtype=dtype, count=n)
        return np.stack([rows["x"], rows["y"], rows["z"]], axis=1)
    rows = np.loadtxt(body.decode("ascii").splitlines(), ndmin=2)
    return rows[:, :3]

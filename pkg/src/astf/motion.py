"""Fixed-length masked motion clips and the preprocessing protocol.

Clip feature layout is (channels, frames, joints) with 10 channels per
joint:

* 0..5   joint rotation as the first two columns of its local rotation
         matrix, column-major (continuous 6-value encoding, radian-free);
* 6..8   root linear velocity per retained frame (root joint only);
* 9      root yaw angular velocity (root joint only).

Non-root joints carry zeros in channels 6..9. Masked-out frames are
exactly zero everywhere, and the mask is always a contiguous prefix of
valid frames. The encoding id is stored in the clip cache for decode
symmetry.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .bvh import (
    BVHError,
    Joint,
    RawMotion,
    Skeleton,
    euler_to_rotmat,
    frame_root_position,
    rotation_order,
    rotmat_to_euler,
)

FEATURE_DIM = 10
ROT6 = slice(0, 6)
ROOT_VEL = slice(6, 9)
ROOT_YAW = 9
ENCODING_ID = "rot6d+rootvel+yawvel"

_MAGIC = b"ASTFCLIP"
_VERSION = 1


class ClipError(ValueError):
    pass


@dataclass
class MotionClip:
    features: np.ndarray  # (FEATURE_DIM, frame_len, n_joints)
    mask: np.ndarray  # (frame_len,) bool, contiguous prefix
    skeleton: Skeleton
    frame_time: float
    style_label: str | None = None
    content_label: str | None = None

    @property
    def frame_len(self) -> int:
        return self.features.shape[1]

    @property
    def n_joints(self) -> int:
        return self.features.shape[2]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def validate(self):
        d, L, J = self.features.shape
        if d != FEATURE_DIM:
            raise ClipError(f"expected {FEATURE_DIM} channels, got {d}")
        if self.mask.shape != (L,):
            raise ClipError("mask length must equal frame length")
        n = self.n_valid
        if n < 1:
            raise ClipError("clip has no valid frames")
        if not self.mask[:n].all() or self.mask[n:].any():
            raise ClipError("mask must be a contiguous prefix of valid frames")
        if self.features[:, n:, :].any():
            raise ClipError("masked-out frames must be exactly zero")


def matrix_to_rot6(r: np.ndarray) -> np.ndarray:
    """First two columns of a rotation matrix, column-major (6 values)."""
    return np.concatenate([r[:, 0], r[:, 1]])


def rot6_to_matrix(six: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt a 6-value rotation encoding back to a proper rotation.

    Norms are floored at eps (not inflated), so well-formed encodings decode
    exactly.
    """
    a, b = six[:3], six[3:]
    v1 = a / max(np.linalg.norm(a), eps)
    u = b - (v1 @ b) * v1
    v2 = u / max(np.linalg.norm(u), eps)
    return np.stack([v1, v2, np.cross(v1, v2)], axis=1)


def _yaw_angle(r: np.ndarray) -> float:
    forward = r @ np.array([0.0, 0.0, 1.0])
    return float(np.arctan2(forward[0], forward[2]))


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def downsample(motion: RawMotion, factor: int = 2) -> RawMotion:
    """Keep every ``factor``-th frame starting at index 0."""
    return RawMotion(motion.skeleton, motion.frame_time * factor, motion.frames[::factor])


def featurize(motion: RawMotion) -> np.ndarray:
    """Encode a RawMotion into the (10, F, J) clip feature tensor."""
    motion.validate()
    sk = motion.skeleton
    n_frames = motion.frames.shape[0]
    slices = sk.channel_slices()
    feats = np.zeros((FEATURE_DIM, n_frames, sk.n_joints))

    yaw = np.zeros(n_frames)
    positions = np.zeros((n_frames, 3))
    for f in range(n_frames):
        row = motion.frames[f]
        for ji, (joint, sl) in enumerate(zip(sk.joints, slices)):
            vals = row[sl]
            rot_vals = [v for v, tag in zip(vals, joint.channels) if tag.endswith("rotation")]
            r = euler_to_rotmat(rot_vals, rotation_order(joint.channels)) if rot_vals else np.eye(3)
            feats[ROT6, f, ji] = matrix_to_rot6(r)
            if ji == 0:
                yaw[f] = _yaw_angle(r)
        positions[f] = frame_root_position(motion, f)

    feats[ROOT_VEL, 1:, 0] = (positions[1:] - positions[:-1]).T
    feats[ROOT_YAW, 1:, 0] = _wrap_angle(yaw[1:] - yaw[:-1])
    return feats


def _pack_clip(feats: np.ndarray, frame_len: int, skeleton, frame_time,
               style=None, content=None) -> MotionClip:
    d, f_avail, j = feats.shape
    valid = min(f_avail, frame_len)
    out = np.zeros((d, frame_len, j))
    out[:, :valid, :] = feats[:, :valid, :]
    mask = np.zeros(frame_len, dtype=bool)
    mask[:valid] = True
    clip = MotionClip(out, mask, skeleton, frame_time, style, content)
    clip.validate()
    return clip


def preprocess_xia(motion: RawMotion, frame_len: int = 200, *,
                   style_label=None, content_label=None) -> MotionClip:
    """Variable-length protocol: downsample x2, zero-pad (or truncate) to
    ``frame_len`` frames, with a validity mask over the real frames."""
    if motion.frames.shape[0] < 1:
        raise ClipError("empty motion")
    ds = downsample(motion)
    feats = featurize(ds)
    return _pack_clip(feats, frame_len, motion.skeleton, ds.frame_time,
                      style_label, content_label)


def preprocess_bfa(motion: RawMotion, frame_len: int = 200, *,
                   style_label=None, content_label=None) -> list[MotionClip]:
    """Fixed-group protocol: consecutive non-overlapping windows of
    ``2 * frame_len`` raw frames (remainder discarded), each downsampled x2
    to exactly ``frame_len`` valid frames."""
    group = 2 * frame_len
    total = motion.frames.shape[0]
    clips = []
    for start in range(0, total - group + 1, group):
        window = RawMotion(
            motion.skeleton, motion.frame_time, motion.frames[start : start + group]
        )
        ds = downsample(window)
        feats = featurize(ds)
        clips.append(
            _pack_clip(feats, frame_len, motion.skeleton, ds.frame_time,
                       style_label, content_label)
        )
    return clips


def clip_rotations(clip: MotionClip) -> np.ndarray:
    """Decode per-frame, per-joint rotation matrices (n_valid, J, 3, 3)."""
    n, j = clip.n_valid, clip.n_joints
    out = np.zeros((n, j, 3, 3))
    for f in range(n):
        for ji in range(j):
            out[f, ji] = rot6_to_matrix(clip.features[ROT6, f, ji])
    return out


def clip_to_raw(clip: MotionClip, root_start: np.ndarray | None = None) -> RawMotion:
    """Rebuild a RawMotion over the valid frames of a clip.

    Root position is integrated from the linear-velocity channels starting
    at ``root_start`` (origin by default); joint rotations come from the
    6-value blocks. The yaw-velocity channel is descriptive only and is not
    consumed here.
    """
    sk = clip.skeleton
    if sk is None:
        raise ClipError("clip has no skeleton reference")
    n = clip.n_valid
    rotations = clip_rotations(clip)
    positions = np.cumsum(clip.features[ROOT_VEL, :n, 0].T, axis=0)
    if root_start is not None:
        positions = positions + np.asarray(root_start, dtype=np.float64)

    rows = np.zeros((n, sk.total_channels))
    for f in range(n):
        col = 0
        for ji, joint in enumerate(sk.joints):
            if not joint.channels:
                continue
            angles = rotmat_to_euler(rotations[f, ji], rotation_order(joint.channels))
            ai = iter(angles)
            for tag in joint.channels:
                if tag.endswith("position"):
                    rows[f, col] = positions[f, "XYZ".index(tag[0])]
                else:
                    rows[f, col] = next(ai)
                col += 1
    return RawMotion(sk, clip.frame_time, rows)


# -- clip cache -----------------------------------------------------------------


def _skeleton_meta(clip: MotionClip) -> dict:
    joints = [
        {
            "name": j.name,
            "parent": j.parent,
            "offset": list(j.offset),
            "channels": list(j.channels),
            "end_offset": None if j.end_offset is None else list(j.end_offset),
        }
        for j in clip.skeleton.joints
    ]
    return {"frame_time": clip.frame_time, "encoding": ENCODING_ID, "joints": joints}


def save_clip(clip: MotionClip, path) -> None:
    clip.validate()
    d, L, j = clip.features.shape
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<IIII", _VERSION, d, L, j)
    blob += clip.mask.astype(np.uint8).tobytes()
    blob += np.ascontiguousarray(clip.features, dtype="<f8").tobytes()
    for label in (clip.style_label, clip.content_label):
        enc = (label or "").encode("utf-8")
        blob += struct.pack("<I", len(enc)) + enc
    meta = json.dumps(_skeleton_meta(clip), sort_keys=True, separators=(",", ":")).encode()
    blob += struct.pack("<I", len(meta)) + meta
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_clip(path) -> MotionClip:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ClipError(f"{path}: not a clip cache file")
    version, d, L, j = struct.unpack_from("<IIII", blob, 8)
    if version != _VERSION:
        raise ClipError(f"{path}: unsupported clip cache version {version}")
    off = 8 + 16
    mask = np.frombuffer(blob, dtype=np.uint8, count=L, offset=off).astype(bool)
    off += L
    count = d * L * j
    feats = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(d, L, j).copy()
    off += count * 8
    labels = []
    for _ in range(2):
        (ln,) = struct.unpack_from("<I", blob, off)
        off += 4
        labels.append(blob[off : off + ln].decode("utf-8") or None)
        off += ln
    (ln,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off : off + ln].decode("utf-8"))
    if meta["encoding"] != ENCODING_ID:
        raise ClipError(f"{path}: unknown feature encoding {meta['encoding']!r}")
    joints = [
        Joint(
            jd["name"],
            jd["parent"],
            np.array(jd["offset"], dtype=np.float64),
            tuple(jd["channels"]),
            None if jd["end_offset"] is None else np.array(jd["end_offset"]),
        )
        for jd in meta["joints"]
    ]
    clip = MotionClip(feats, mask, Skeleton(joints), meta["frame_time"], labels[0], labels[1])
    clip.validate()
    return clip

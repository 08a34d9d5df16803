"""Biovision Hierarchy (BVH) parsing, writing, and skeleton editing.

A BVH file has a HIERARCHY section (nested joint tree with OFFSET and
CHANNELS declarations) followed by a MOTION section (frame count, frame
time, and one whitespace-separated row of channel values per frame).
Rotations are degrees, positions are in the dataset's length units.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

CHANNEL_TAGS = (
    "Xposition",
    "Yposition",
    "Zposition",
    "Xrotation",
    "Yrotation",
    "Zrotation",
)


class BVHError(ValueError):
    """Malformed BVH input; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Joint:
    name: str
    parent: int | None
    offset: np.ndarray
    channels: tuple[str, ...]
    end_offset: np.ndarray | None = None


@dataclass
class Skeleton:
    joints: list[Joint] = field(default_factory=list)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def total_channels(self) -> int:
        return sum(len(j.channels) for j in self.joints)

    def channel_slices(self) -> list[slice]:
        """Per-joint column ranges into a frame row."""
        out, start = [], 0
        for j in self.joints:
            out.append(slice(start, start + len(j.channels)))
            start += len(j.channels)
        return out

    def children(self, index: int) -> list[int]:
        return [i for i, j in enumerate(self.joints) if j.parent == index]

    def validate(self):
        roots = [i for i, j in enumerate(self.joints) if j.parent is None]
        if len(roots) != 1 or roots[0] != 0:
            raise BVHError("skeleton must have exactly one root at index 0")
        for i, j in enumerate(self.joints):
            if j.parent is not None and j.parent >= i:
                raise BVHError(f"joint {j.name}: parent must precede child")
            if len(j.channels) not in (0, 3, 6):
                raise BVHError(f"joint {j.name}: channel count must be 0, 3 or 6")

    def equals(self, other: "Skeleton", offset_tol: float = 1e-6) -> bool:
        if self.n_joints != other.n_joints:
            return False
        for a, b in zip(self.joints, other.joints):
            if a.name != b.name or a.parent != b.parent or a.channels != b.channels:
                return False
            if not np.allclose(a.offset, b.offset, atol=offset_tol):
                return False
        return True


@dataclass
class RawMotion:
    skeleton: Skeleton
    frame_time: float
    frames: np.ndarray  # (F, total_channels)

    def validate(self):
        self.skeleton.validate()
        if self.frames.ndim != 2 or self.frames.shape[1] != self.skeleton.total_channels:
            raise BVHError(
                f"frame width {self.frames.shape} != skeleton channels "
                f"{self.skeleton.total_channels}"
            )
        if self.frames.shape[0] < 1:
            raise BVHError("motion must contain at least one frame")
        if self.frame_time <= 0:
            raise BVHError("frame time must be positive")


class _Tokens:
    def __init__(self, text: str):
        self.items = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            for tok in line.split():
                self.items.append((tok, lineno))
        self.pos = 0

    def peek(self):
        return self.items[self.pos] if self.pos < len(self.items) else (None, None)

    def next(self, expect: str | None = None):
        tok, line = self.peek()
        if tok is None:
            raise BVHError("unexpected end of file", self.items[-1][1] if self.items else 0)
        self.pos += 1
        if expect is not None and tok != expect:
            raise BVHError(f"expected {expect!r}, found {tok!r}", line)
        return tok, line

    def next_float(self) -> float:
        tok, line = self.next()
        try:
            return float(tok)
        except ValueError:
            raise BVHError(f"expected a number, found {tok!r}", line) from None

    def next_int(self) -> int:
        tok, line = self.next()
        try:
            return int(tok)
        except ValueError:
            raise BVHError(f"expected an integer, found {tok!r}", line) from None


def parse_bvh(text: str) -> RawMotion:
    """Parse BVH text into a RawMotion, reporting errors with line numbers."""
    toks = _Tokens(text)
    toks.next("HIERARCHY")
    kw, line = toks.next()
    if kw != "ROOT":
        raise BVHError(f"expected ROOT, found {kw!r}", line)
    skeleton = Skeleton()
    _parse_joint(toks, skeleton, parent=None)

    tok, line = toks.next()
    if tok != "MOTION":
        raise BVHError(f"expected MOTION, found {tok!r}", line)
    toks.next("Frames:")
    n_frames = toks.next_int()
    tok, line = toks.next()
    if tok == "Frame" and toks.peek()[0] == "Time:":
        toks.next()
    else:
        raise BVHError(f"expected 'Frame Time:', found {tok!r}", line)
    frame_time = toks.next_float()

    width = skeleton.total_channels
    values = []
    while toks.peek()[0] is not None:
        values.append(toks.next_float())
    if len(values) != n_frames * width:
        got = len(values) / width if width else 0
        raise BVHError(
            f"frame-count mismatch: header says {n_frames} frames of {width} "
            f"channels, data holds {got:g} rows",
            toks.items[-1][1] if toks.items else 0,
        )
    frames = np.array(values, dtype=np.float64).reshape(n_frames, width)
    motion = RawMotion(skeleton, frame_time, frames)
    motion.validate()
    return motion


def _parse_joint(toks: _Tokens, skeleton: Skeleton, parent: int | None):
    name, _ = toks.next()
    toks.next("{")
    toks.next("OFFSET")
    offset = np.array([toks.next_float() for _ in range(3)])
    tok, line = toks.peek()
    channels: tuple[str, ...] = ()
    if tok == "CHANNELS":
        toks.next()
        n = toks.next_int()
        given = []
        for _ in range(n):
            tag, tline = toks.next()
            if tag not in CHANNEL_TAGS:
                raise BVHError(f"unknown channel tag {tag!r}", tline)
            given.append(tag)
        channels = tuple(given)
    index = len(skeleton.joints)
    skeleton.joints.append(Joint(name, parent, offset, channels))

    while True:
        tok, line = toks.next()
        if tok == "JOINT":
            _parse_joint(toks, skeleton, parent=index)
        elif tok == "End":
            toks.next("Site")
            toks.next("{")
            toks.next("OFFSET")
            skeleton.joints[index].end_offset = np.array(
                [toks.next_float() for _ in range(3)]
            )
            toks.next("}")
        elif tok == "}":
            return
        else:
            raise BVHError(f"unexpected token {tok!r} in joint block (unbalanced braces?)", line)


def _fmt(x: float) -> str:
    """Six digits after the decimal point; round-trips within 1e-6 absolute."""
    s = f"{x:.6f}"
    return "0.000000" if s == "-0.000000" else s


def write_bvh(motion: RawMotion) -> str:
    """Serialize a RawMotion; parse(write(m)) equals m within 1e-6.

    Frame time is written exactly (shortest round-trip form); all other
    numbers carry six decimal places. Leaf joints always get an End Site.
    """
    motion.validate()
    sk = motion.skeleton
    lines = ["HIERARCHY"]

    def emit(index: int, depth: int):
        j = sk.joints[index]
        pad = "  " * depth
        kw = "ROOT" if j.parent is None else "JOINT"
        lines.append(f"{pad}{kw} {j.name}")
        lines.append(f"{pad}{{")
        inner = "  " * (depth + 1)
        lines.append(f"{inner}OFFSET {' '.join(_fmt(v) for v in j.offset)}")
        if j.channels:
            lines.append(f"{inner}CHANNELS {len(j.channels)} {' '.join(j.channels)}")
        kids = sk.children(index)
        if kids:
            for k in kids:
                emit(k, depth + 1)
        else:
            end = j.end_offset if j.end_offset is not None else np.zeros(3)
            lines.append(f"{inner}End Site")
            lines.append(f"{inner}{{")
            lines.append(f"{inner}  OFFSET {' '.join(_fmt(v) for v in end)}")
            lines.append(f"{inner}}}")
        lines.append(f"{pad}}}")

    emit(0, 0)
    lines.append("MOTION")
    lines.append(f"Frames: {motion.frames.shape[0]}")
    lines.append(f"Frame Time: {motion.frame_time!r}")
    for row in motion.frames:
        lines.append(" ".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def select_joints(motion: RawMotion, names: list[str]) -> RawMotion:
    """Restrict a motion to the named joints.

    Each kept joint is re-parented to its nearest kept ancestor; the offsets
    of dropped intermediate joints are accumulated into it (their rotations
    are discarded). Exactly one kept joint may lack a kept ancestor: it
    becomes the new root, keeping its full rest offset from the old root.
    """
    sk = motion.skeleton
    by_name = {j.name: i for i, j in enumerate(sk.joints)}
    unknown = [n for n in names if n not in by_name]
    if unknown:
        raise BVHError(f"unknown joint name(s): {', '.join(unknown)}")
    keep = sorted({by_name[n] for n in names})
    old_to_new = {old: new for new, old in enumerate(keep)}

    new_joints: list[Joint] = []
    for old in keep:
        j = sk.joints[old]
        offset = j.offset.copy()
        anc = j.parent
        while anc is not None and anc not in old_to_new:
            offset = offset + sk.joints[anc].offset
            anc = sk.joints[anc].parent
        if anc is None and new_joints:
            raise BVHError(
                f"selection disconnects the hierarchy: {j.name} and "
                f"{new_joints[0].name} have no common kept ancestor"
            )
        new_joints.append(
            replace(
                j,
                parent=None if anc is None else old_to_new[anc],
                offset=offset,
                end_offset=None if sk.children(old) else j.end_offset,
            )
        )

    slices = sk.channel_slices()
    cols = [motion.frames[:, slices[old]] for old in keep]
    frames = np.concatenate(cols, axis=1) if cols else np.zeros((motion.frames.shape[0], 0))
    out = RawMotion(Skeleton(new_joints), motion.frame_time, frames)
    out.validate()
    return out


# -- rotations ------------------------------------------------------------------

_AXIS_INDEX = {"X": 0, "Y": 1, "Z": 2}


def _axis_rotation(axis: str, radians: float) -> np.ndarray:
    c, s = np.cos(radians), np.sin(radians)
    if axis == "X":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    if axis == "Y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    if axis == "Z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    raise ValueError(f"bad axis {axis!r}")


def rotation_order(channels) -> str:
    """Extract the rotation-axis order (e.g. 'ZXY') from channel tags."""
    order = "".join(tag[0] for tag in channels if tag.endswith("rotation"))
    if sorted(order) != ["X", "Y", "Z"]:
        raise BVHError(f"rotation channels are not a permutation of X/Y/Z: {channels}")
    return order


def euler_to_rotmat(angles_deg, order: str) -> np.ndarray:
    """Compose the listed-order intrinsic rotations into a 3x3 matrix.

    ``angles_deg`` are in the same order as ``order`` (a permutation of XYZ).
    The result is a proper rotation: R^T R = I, det R = 1.
    """
    if sorted(order) != ["X", "Y", "Z"]:
        raise ValueError(f"order must be a permutation of XYZ, got {order!r}")
    r = np.eye(3)
    for axis, angle in zip(order, np.asarray(angles_deg, dtype=np.float64)):
        r = r @ _axis_rotation(axis, np.deg2rad(angle))
    return r


def rotmat_to_euler(r: np.ndarray, order: str) -> np.ndarray:
    """Invert euler_to_rotmat: angles in degrees, listed order.

    Uses the standard Tait-Bryan extraction for each of the six orders; at
    gimbal lock (|middle angle| = 90 degrees) the third angle is set to 0.
    """
    c = np.clip
    if order == "XYZ":
        y = np.arcsin(c(r[0, 2], -1, 1))
        if abs(r[0, 2]) < 1 - 1e-12:
            x = np.arctan2(-r[1, 2], r[2, 2])
            z = np.arctan2(-r[0, 1], r[0, 0])
        else:
            x, z = np.arctan2(r[2, 1], r[1, 1]), 0.0
        angles = (x, y, z)
    elif order == "XZY":
        z = np.arcsin(c(-r[0, 1], -1, 1))
        if abs(r[0, 1]) < 1 - 1e-12:
            x = np.arctan2(r[2, 1], r[1, 1])
            y = np.arctan2(r[0, 2], r[0, 0])
        else:
            x, y = np.arctan2(-r[1, 2], r[2, 2]), 0.0
        angles = (x, z, y)
    elif order == "YXZ":
        x = np.arcsin(c(-r[1, 2], -1, 1))
        if abs(r[1, 2]) < 1 - 1e-12:
            y = np.arctan2(r[0, 2], r[2, 2])
            z = np.arctan2(r[1, 0], r[1, 1])
        else:
            y, z = np.arctan2(-r[2, 0], r[0, 0]), 0.0
        angles = (y, x, z)
    elif order == "YZX":
        z = np.arcsin(c(r[1, 0], -1, 1))
        if abs(r[1, 0]) < 1 - 1e-12:
            y = np.arctan2(-r[2, 0], r[0, 0])
            x = np.arctan2(-r[1, 2], r[1, 1])
        else:
            y, x = np.arctan2(r[0, 2], r[2, 2]), 0.0
        angles = (y, z, x)
    elif order == "ZXY":
        x = np.arcsin(c(r[2, 1], -1, 1))
        if abs(r[2, 1]) < 1 - 1e-12:
            z = np.arctan2(-r[0, 1], r[1, 1])
            y = np.arctan2(-r[2, 0], r[2, 2])
        else:
            z, y = np.arctan2(r[1, 0], r[0, 0]), 0.0
        angles = (z, x, y)
    elif order == "ZYX":
        y = np.arcsin(c(-r[2, 0], -1, 1))
        if abs(r[2, 0]) < 1 - 1e-12:
            z = np.arctan2(r[1, 0], r[0, 0])
            x = np.arctan2(r[2, 1], r[2, 2])
        else:
            z, x = np.arctan2(-r[0, 1], r[1, 1]), 0.0
        angles = (z, y, x)
    else:
        raise ValueError(f"order must be a permutation of XYZ, got {order!r}")
    return np.rad2deg(np.array(angles))


def frame_rotations(motion: RawMotion, frame: int) -> list[np.ndarray]:
    """Local rotation matrix per joint at one frame (identity if no channels)."""
    rows = motion.frames[frame]
    out = []
    for j, sl in zip(motion.skeleton.joints, motion.skeleton.channel_slices()):
        vals = rows[sl]
        rot_vals = [v for v, tag in zip(vals, j.channels) if tag.endswith("rotation")]
        if rot_vals:
            out.append(euler_to_rotmat(rot_vals, rotation_order(j.channels)))
        else:
            out.append(np.eye(3))
    return out


def frame_root_position(motion: RawMotion, frame: int) -> np.ndarray:
    """World position of the root from its position channels (0 if absent)."""
    root = motion.skeleton.joints[0]
    sl = motion.skeleton.channel_slices()[0]
    vals = motion.frames[frame, sl]
    pos = np.zeros(3)
    for v, tag in zip(vals, root.channels):
        if tag.endswith("position"):
            pos[_AXIS_INDEX[tag[0]]] = v
    return pos


def forward_kinematics(
    skeleton: Skeleton, rotations: list[np.ndarray], root_position: np.ndarray
) -> np.ndarray:
    """World joint positions (J, 3) from local rotations and root position."""
    n = skeleton.n_joints
    world_r = [np.eye(3)] * n
    pos = np.zeros((n, 3))
    for i, j in enumerate(skeleton.joints):
        if j.parent is None:
            world_r[i] = rotations[i]
            pos[i] = skeleton.joints[i].offset + root_position
        else:
            p = j.parent
            pos[i] = pos[p] + world_r[p] @ j.offset
            world_r[i] = world_r[p] @ rotations[i]
    return pos

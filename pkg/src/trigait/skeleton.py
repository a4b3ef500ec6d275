"""Simplified SMPL-style skeleton: kinematic tree, forward kinematics,
rest-pose canonical grid coordinates, and a capsule-body silhouette projector.

Conventions (documented once, relied on everywhere):
  * world axes: +y is up, +x is the subject's anatomical left, +z is forward;
  * image rows grow downwards, so the highest joint lands in row 0;
  * image columns grow from -x to +x, so the anatomical right side is column 0;
  * `capsule_radius[j]` is the radius of the bone from `parent_index[j]` to
    joint `j`; the root entry is unused but must still be positive.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import yaml

SKELETON_FORMAT_VERSION = 1
SMPL_JOINT_COUNT = 24

ROOT_SENTINEL = -1


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree with rest-pose bone offsets and per-bone capsule radii.

    Invariants: the parent graph is a tree rooted at joint 0 with
    parent_index[j] < j for every j > 0, offsets are finite and radii are
    strictly positive.  Pose-driven operations additionally require the
    standard 24-joint layout; degenerate skeletons (e.g. a single bone) are
    allowed so rendering primitives can be tested in isolation.
    """

    joint_names: tuple[str, ...]
    parent_index: tuple[int, ...]
    bone_offset: np.ndarray  # (J, 3) float64, meters
    capsule_radius: np.ndarray  # (J,) float64, meters

    def __post_init__(self):
        offsets = np.asarray(self.bone_offset, dtype=np.float64)
        radii = np.asarray(self.capsule_radius, dtype=np.float64)
        object.__setattr__(self, "bone_offset", offsets)
        object.__setattr__(self, "capsule_radius", radii)
        n = len(self.joint_names)
        if n < 2:
            raise ValueError("skeleton needs at least two joints")
        if len(set(self.joint_names)) != n:
            raise ValueError("joint names must be unique")
        if len(self.parent_index) != n or offsets.shape != (n, 3) or radii.shape != (n,):
            raise ValueError("joint_names, parent_index, bone_offset and capsule_radius disagree in length")
        if self.parent_index[0] != ROOT_SENTINEL:
            raise ValueError("joint 0 must be the root (parent sentinel -1)")
        for j, p in enumerate(self.parent_index[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"parent_index[{j}] = {p} violates parent_index[j] < j")
        if not np.all(np.isfinite(offsets)):
            raise ValueError("bone offsets must be finite")
        if not np.all(radii > 0):
            raise ValueError("capsule radii must be strictly positive")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def bones(self) -> list[tuple[int, int]]:
        """(parent, child) pairs; one bone per non-root joint."""
        return [(self.parent_index[j], j) for j in range(1, self.num_joints)]

    def rest_positions(self) -> np.ndarray:
        """Joint positions under zero rotations and zero translation."""
        pose = np.zeros((self.num_joints, 3))
        return forward_kinematics(pose, self, np.zeros(3))

    def scaled(self, length_scale: float | np.ndarray = 1.0, radius_scale: float = 1.0) -> "Skeleton":
        """Return a copy with per-joint offset lengths and radii scaled."""
        scale = np.broadcast_to(np.asarray(length_scale, dtype=np.float64), (self.num_joints,))
        return Skeleton(
            joint_names=self.joint_names,
            parent_index=self.parent_index,
            bone_offset=self.bone_offset * scale[:, None],
            capsule_radius=self.capsule_radius * radius_scale,
        )

    def index_of(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise KeyError(f"unknown joint {name!r}") from None

    def to_dict(self) -> dict:
        joints = []
        for j, name in enumerate(self.joint_names):
            parent = None if self.parent_index[j] == ROOT_SENTINEL else self.joint_names[self.parent_index[j]]
            joints.append(
                {
                    "name": name,
                    "parent": parent,
                    "offset": [float(v) for v in self.bone_offset[j]],
                    "radius": float(self.capsule_radius[j]),
                }
            )
        return {"format_version": SKELETON_FORMAT_VERSION, "joints": joints}

    @classmethod
    def from_dict(cls, data: dict) -> "Skeleton":
        if not isinstance(data, dict) or "joints" not in data:
            raise ValueError("skeleton definition must be a mapping with a 'joints' list")
        version = data.get("format_version")
        if version != SKELETON_FORMAT_VERSION:
            raise ValueError(f"unsupported skeleton format_version {version!r}")
        joints = data["joints"]
        names = [j["name"] for j in joints]
        index = {name: i for i, name in enumerate(names)}
        parents = []
        for j in joints:
            parent = j.get("parent")
            if parent is None:
                parents.append(ROOT_SENTINEL)
            elif parent in index:
                parents.append(index[parent])
            else:
                raise ValueError(f"joint {j['name']!r} references unknown parent {parent!r}")
        offsets = np.array([j["offset"] for j in joints], dtype=np.float64)
        radii = np.array([j["radius"] for j in joints], dtype=np.float64)
        return cls(tuple(names), tuple(parents), offsets, radii)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> "Skeleton":
        text = Path(path).read_text()
        return cls.from_dict(yaml.safe_load(text))


def default_skeleton() -> Skeleton:
    """The bundled 24-joint skeleton (stylized adult, ~1.7 m tall)."""
    ref = importlib.resources.files("trigait") / "assets" / "default_skeleton.yaml"
    return Skeleton.from_dict(yaml.safe_load(ref.read_text()))


@dataclass(frozen=True)
class SmplPoseSequence:
    """Per-frame axis-angle rotations for the 24-joint tree, plus shape and
    root translation.  `betas` is carried for format fidelity only; the
    capsule renderer ignores it."""

    pose: np.ndarray  # (N, 24, 3) axis-angle, radians
    betas: np.ndarray  # (10,)
    trans: np.ndarray  # (N, 3) meters

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        betas = np.asarray(self.betas, dtype=np.float64)
        trans = np.asarray(self.trans, dtype=np.float64)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "trans", trans)
        if pose.ndim != 3 or pose.shape[1:] != (SMPL_JOINT_COUNT, 3) or pose.shape[0] < 1:
            raise ValueError(f"pose must be (N>=1, {SMPL_JOINT_COUNT}, 3), got {pose.shape}")
        if betas.shape != (10,):
            raise ValueError(f"betas must have shape (10,), got {betas.shape}")
        if trans.shape != (pose.shape[0], 3):
            raise ValueError(f"trans must be ({pose.shape[0]}, 3), got {trans.shape}")
        if not (np.all(np.isfinite(pose)) and np.all(np.isfinite(betas)) and np.all(np.isfinite(trans))):
            raise ValueError("pose sequence values must be finite")
        norms = np.linalg.norm(pose, axis=-1)
        if np.any(norms > 2 * np.pi + 1e-9):
            raise ValueError("axis-angle norms must not exceed 2*pi")

    @property
    def num_frames(self) -> int:
        return self.pose.shape[0]


def rotation_matrices(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a stack of axis-angle vectors, shape (..., 3) -> (..., 3, 3)."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    # sin(t)/t and (1-cos(t))/t^2 with series fallbacks near zero
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)[..., None]
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)[..., None]
    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a * k + b * (k @ k)


def forward_kinematics(pose_frame: np.ndarray, skeleton: Skeleton, trans: np.ndarray) -> np.ndarray:
    """World joint positions for one frame of per-joint axis-angle rotations.

    position[0] = trans + bone_offset[0]; every other joint is placed at
    position[parent] + R_global(parent) @ bone_offset[j], where R_global
    composes local rotations root-to-leaf.
    """
    pose = np.asarray(pose_frame, dtype=np.float64)
    t = np.asarray(trans, dtype=np.float64)
    n = skeleton.num_joints
    if pose.shape != (n, 3):
        raise ValueError(f"pose frame must have shape ({n}, 3), got {pose.shape}")
    if t.shape != (3,):
        raise ValueError(f"trans must have shape (3,), got {t.shape}")
    if not (np.all(np.isfinite(pose)) and np.all(np.isfinite(t))):
        raise ValueError("pose and trans must be finite")

    local = rotation_matrices(pose)
    positions = np.empty((n, 3))
    globals_ = np.empty((n, 3, 3))
    positions[0] = t + skeleton.bone_offset[0]
    globals_[0] = local[0]
    for j in range(1, n):
        p = skeleton.parent_index[j]
        positions[j] = positions[p] + globals_[p] @ skeleton.bone_offset[j]
        globals_[j] = globals_[p] @ local[j]
    return positions


def fk_sequence(pose: np.ndarray, skeleton: Skeleton, trans: np.ndarray) -> np.ndarray:
    """forward_kinematics over a sequence: (N, J, 3) pose, (N, 3) trans -> (N, J, 3)."""
    pose = np.asarray(pose, dtype=np.float64)
    trans = np.asarray(trans, dtype=np.float64)
    if pose.ndim != 3 or trans.shape != (pose.shape[0], 3):
        raise ValueError("pose must be (N, J, 3) with matching (N, 3) trans")
    return np.stack([forward_kinematics(pose[i], skeleton, trans[i]) for i in range(pose.shape[0])])


def _snap_trig(value: float) -> float:
    # exact-mirror views (0/90/180/270 deg) must not leak the depth axis
    for target in (-1.0, 0.0, 1.0):
        if abs(value - target) < 1e-12:
            return target
    return value


class Projector(Protocol):
    """Anything that turns posed joints into a fixed-view binary silhouette.

    The capsule rasterizer below is the default; a mesh-based renderer can be
    swapped in without touching callers.
    """

    def __call__(
        self,
        joint_positions: np.ndarray,
        view_angle_deg: float,
        image_size: tuple[int, int],
        skeleton: Skeleton,
    ) -> np.ndarray: ...


@dataclass(frozen=True)
class CapsuleProjector:
    """Orthographic capsule-body rasterizer.

    Pixels-per-meter is fixed per skeleton from its rest-pose vertical extent
    (including capsule radii) so the figure scale does not jitter with pose;
    the output is auto-centered, hence invariant to translating all joints.
    """

    fill: float = 0.9

    def __call__(
        self,
        joint_positions: np.ndarray,
        view_angle_deg: float,
        image_size: tuple[int, int],
        skeleton: Skeleton,
    ) -> np.ndarray:
        pos = np.asarray(joint_positions, dtype=np.float64)
        h_img, w_img = int(image_size[0]), int(image_size[1])
        if h_img < 16 or w_img < 16:
            raise ValueError("image size must be at least 16x16")
        if pos.shape != (skeleton.num_joints, 3):
            raise ValueError(f"expected positions of shape ({skeleton.num_joints}, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("joint positions must be finite")
        if np.allclose(pos, pos[0], atol=1e-12):
            raise ValueError("degenerate skeleton: all joints coincident")

        theta = np.deg2rad(float(view_angle_deg))
        c, s = _snap_trig(np.cos(theta)), _snap_trig(np.sin(theta))
        # rotate about the vertical axis, then drop depth: u horizontal, v vertical
        u = pos[:, 0] * c + pos[:, 2] * s
        v = pos[:, 1]

        radii = skeleton.capsule_radius
        bones = skeleton.bones
        u_lo = min(u[j] - radii[child] for parent, child in bones for j in (parent, child))
        u_hi = max(u[j] + radii[child] for parent, child in bones for j in (parent, child))
        v_lo = min(v[j] - radii[child] for parent, child in bones for j in (parent, child))
        v_hi = max(v[j] + radii[child] for parent, child in bones for j in (parent, child))
        center_u = 0.5 * (u_lo + u_hi)
        center_v = 0.5 * (v_lo + v_hi)

        ppm = self.fill * h_img / self._reference_extent(skeleton)

        cols = np.arange(w_img, dtype=np.float64)
        rows = np.arange(h_img, dtype=np.float64)
        px_u = center_u + (cols - (w_img - 1) / 2.0) / ppm
        px_v = center_v + ((h_img - 1) / 2.0 - rows) / ppm
        grid_u = np.broadcast_to(px_u[None, :], (h_img, w_img))
        grid_v = np.broadcast_to(px_v[:, None], (h_img, w_img))

        mask = np.zeros((h_img, w_img), dtype=bool)
        for parent, child in bones:
            mask |= _segment_distance(grid_u, grid_v, (u[parent], v[parent]), (u[child], v[child])) <= radii[child]
        return mask.astype(np.uint8)

    def _reference_extent(self, skeleton: Skeleton) -> float:
        rest = skeleton.rest_positions()
        v = rest[:, 1]
        radii = skeleton.capsule_radius
        lo = min(v[j] - radii[child] for parent, child in skeleton.bones for j in (parent, child))
        hi = max(v[j] + radii[child] for parent, child in skeleton.bones for j in (parent, child))
        extent = hi - lo
        if extent <= 0:
            raise ValueError("skeleton rest pose has zero vertical extent")
        return extent


def _segment_distance(gu: np.ndarray, gv: np.ndarray, a: tuple[float, float], b: tuple[float, float]) -> np.ndarray:
    au, av = gu - a[0], gv - a[1]
    du, dv = b[0] - a[0], b[1] - a[1]
    denom = du * du + dv * dv
    if denom < 1e-18:
        return np.hypot(au, av)
    t = np.clip((au * du + av * dv) / denom, 0.0, 1.0)
    return np.hypot(au - t * du, av - t * dv)


_DEFAULT_PROJECTOR = CapsuleProjector()


def project_silhouette(
    joint_positions: np.ndarray,
    view_angle_deg: float,
    image_size: tuple[int, int],
    skeleton: Skeleton,
    projector: Projector | None = None,
) -> np.ndarray:
    """Binary H x W silhouette of a posed skeleton seen from `view_angle_deg`."""
    proj = projector if projector is not None else _DEFAULT_PROJECTOR
    return proj(joint_positions, view_angle_deg, image_size, skeleton)


@dataclass(frozen=True)
class CanonicalLayout:
    """Per-joint integer cell (h_j, w_j) on the rest-pose canonical grid."""

    coords: tuple[tuple[int, int], ...]
    H: int
    W: int

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ValueError("H and W must be at least 1")
        seen = set()
        for h, w in self.coords:
            if not (0 <= h <= self.H and 0 <= w <= self.W):
                raise ValueError(f"coordinate ({h}, {w}) outside [0,{self.H}]x[0,{self.W}]")
            if (h, w) in seen:
                raise ValueError(f"duplicate canonical cell ({h}, {w})")
            seen.add((h, w))

    @property
    def num_joints(self) -> int:
        return len(self.coords)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=np.float64)


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5).astype(np.int64)


def rest_pose_canonical_coords(skeleton: Skeleton, H: int, W: int) -> CanonicalLayout:
    """Assign every joint a distinct integer cell on an (H+1) x (W+1) grid.

    Frontal-plane rest positions are min-max normalized per axis (a zero-extent
    axis maps to 0), rounded half-up, and rounding collisions are resolved by
    moving the later-indexed joint to the nearest free cell (ties: smaller row,
    then smaller column).  Raises if the grid has fewer cells than joints.
    """
    if H < 1 or W < 1:
        raise ValueError("H and W must be at least 1")
    n = skeleton.num_joints
    if (H + 1) * (W + 1) < n:
        raise ValueError(f"grid {H}x{W} has fewer cells than {n} joints")
    rest = skeleton.rest_positions()
    v = rest[:, 1]  # vertical; higher joint -> row 0
    u = rest[:, 0]  # horizontal; column 0 at the -x side

    def normalize(values: np.ndarray, hi: int, flip: bool) -> np.ndarray:
        span = values.max() - values.min()
        if span == 0:
            return np.zeros_like(values)
        frac = (values - values.min()) / span
        if flip:
            frac = 1.0 - frac
        return frac * hi

    h_cells = _round_half_up(normalize(v, H, flip=True))
    w_cells = _round_half_up(normalize(u, W, flip=False))

    taken: dict[tuple[int, int], int] = {}
    coords: list[tuple[int, int]] = []
    collisions: list[str] = []
    for j in range(n):
        cell = (int(h_cells[j]), int(w_cells[j]))
        if cell in taken:
            collisions.append(f"{skeleton.joint_names[j]} collides with {skeleton.joint_names[taken[cell]]} at {cell}")
            cell = _nearest_free_cell(cell, taken, H, W)
            if cell is None:
                raise ValueError("canonical grid too small; colliding joints: " + "; ".join(collisions))
        taken[cell] = j
        coords.append(cell)
    return CanonicalLayout(tuple(coords), H, W)


def _nearest_free_cell(
    cell: tuple[int, int], taken: dict[tuple[int, int], int], H: int, W: int
) -> tuple[int, int] | None:
    best = None
    best_key = None
    for r in range(H + 1):
        for c in range(W + 1):
            if (r, c) in taken:
                continue
            key = ((r - cell[0]) ** 2 + (c - cell[1]) ** 2, r, c)
            if best_key is None or key < best_key:
                best, best_key = (r, c), key
    return best

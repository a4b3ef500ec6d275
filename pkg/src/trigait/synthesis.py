"""Procedural walking-motion synthesis and dataset generation.

Each identity gets a gait signature (stride frequency, per-joint swing
amplitudes and phase offsets, limb-length and girth scales) drawn from a
seeded RNG tree, so the whole dataset is a pure function of (config, seed).
Sequences differ by capture view, clothing level, and an integer-frame gait
phase offset; clothing is simulated as mask dilation plus boundary noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .skeleton import Skeleton, SmplPoseSequence, default_skeleton, fk_sequence, project_silhouette

MANIFEST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 16
    sequences_per_identity: int = 6
    frames_per_sequence: int = 60
    views_deg: tuple[float, ...] = (0.0, 90.0)
    clothing_levels: tuple[int, ...] = (0, 2)
    image_size: int = 64
    fps: float = 25.0
    train_fraction: float = 0.6
    queries_per_identity: int = 2

    def __post_init__(self):
        object.__setattr__(self, "views_deg", tuple(float(v) for v in self.views_deg))
        object.__setattr__(self, "clothing_levels", tuple(int(c) for c in self.clothing_levels))
        if self.num_identities < 1:
            raise ConfigError("num_identities must be at least 1")
        if self.sequences_per_identity < 1:
            raise ConfigError("sequences_per_identity must be at least 1")
        if self.frames_per_sequence < 1:
            raise ConfigError("frames_per_sequence must be at least 1")
        if not self.views_deg:
            raise ConfigError("views_deg must be nonempty")
        if not self.clothing_levels or any(c < 0 or c > 3 for c in self.clothing_levels):
            raise ConfigError("clothing_levels must be nonempty with entries in 0..3")
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in [0, 1]")
        if self.queries_per_identity < 1:
            raise ConfigError("queries_per_identity must be at least 1")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        if not isinstance(data, dict):
            raise ConfigError("synth config must be a mapping")
        known = {f.name for f in _dataclass_fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _dataclass_fields(cls):
    import dataclasses

    return dataclasses.fields(cls)


@dataclass(frozen=True)
class GaitSignature:
    """Identity-specific walking style, sampled once per identity."""

    stride_freq_hz: float
    hip_amp: float
    knee_amp: float
    knee_base: float
    knee_phase: float
    ankle_amp: float
    ankle_phase: float
    arm_amp: float
    arm_phase: float
    arm_drop: float
    elbow_base: float
    elbow_amp: float
    twist_amp: float
    bob_amp: float
    sway_amp: float
    leg_scale: float
    arm_scale: float
    torso_scale: float
    girth_scale: float
    betas: np.ndarray = field(repr=False)


def sample_signature(rng: np.random.Generator) -> GaitSignature:
    return GaitSignature(
        stride_freq_hz=float(rng.uniform(0.7, 1.4)),
        hip_amp=float(rng.uniform(0.35, 0.65)),
        knee_amp=float(rng.uniform(0.5, 0.95)),
        knee_base=float(rng.uniform(0.05, 0.15)),
        knee_phase=float(rng.uniform(0.5, 1.1)),
        ankle_amp=float(rng.uniform(0.05, 0.2)),
        ankle_phase=float(rng.uniform(-0.4, 0.4)),
        arm_amp=float(rng.uniform(0.25, 0.6)),
        arm_phase=float(rng.uniform(-0.25, 0.25)),
        arm_drop=float(rng.uniform(0.95, 1.25)),
        elbow_base=float(rng.uniform(0.15, 0.35)),
        elbow_amp=float(rng.uniform(0.1, 0.35)),
        twist_amp=float(rng.uniform(0.03, 0.12)),
        bob_amp=float(rng.uniform(0.015, 0.03)),
        sway_amp=float(rng.uniform(0.005, 0.015)),
        leg_scale=float(rng.uniform(0.92, 1.08)),
        arm_scale=float(rng.uniform(0.92, 1.08)),
        torso_scale=float(rng.uniform(0.94, 1.06)),
        girth_scale=float(rng.uniform(0.85, 1.15)),
        betas=rng.normal(0.0, 1.0, size=10),
    )


_LEG_JOINTS = (
    "left_hip", "right_hip", "left_knee", "right_knee",
    "left_ankle", "right_ankle", "left_foot", "right_foot",
)
_ARM_JOINTS = (
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hand", "right_hand",
)
_TORSO_JOINTS = ("spine1", "spine2", "spine3", "neck", "head", "left_collar", "right_collar")


def body_skeleton(signature: GaitSignature, base: Skeleton | None = None) -> Skeleton:
    """Apply the signature's limb proportions to the base skeleton."""
    skeleton = base if base is not None else default_skeleton()
    scale = np.ones(skeleton.num_joints)
    for names, factor in (
        (_LEG_JOINTS, signature.leg_scale),
        (_ARM_JOINTS, signature.arm_scale),
        (_TORSO_JOINTS, signature.torso_scale),
    ):
        for name in names:
            scale[skeleton.index_of(name)] = factor
    return skeleton.scaled(scale, radius_scale=signature.girth_scale)


def build_pose_sequence(
    signature: GaitSignature,
    num_frames: int,
    fps: float,
    phase_offset_frames: int,
    skeleton: Skeleton | None = None,
) -> SmplPoseSequence:
    """Sinusoidal joint-angle trajectories for one walking clip.

    The gait phase advances by a fixed step per frame, so two clips of the
    same identity differ only by an integer-frame phase shift.
    """
    skeleton = skeleton if skeleton is not None else default_skeleton()
    j = skeleton.index_of
    step = 2.0 * math.pi * signature.stride_freq_hz / fps
    i = np.arange(num_frames)
    phi = (phase_offset_frames + i) * step

    pose = np.zeros((num_frames, skeleton.num_joints, 3))
    # legs: hips swing in antiphase, knees flex on the swing half-cycle
    pose[:, j("left_hip"), 0] = signature.hip_amp * np.sin(phi)
    pose[:, j("right_hip"), 0] = signature.hip_amp * np.sin(phi + math.pi)
    pose[:, j("left_knee"), 0] = signature.knee_base + signature.knee_amp * np.maximum(
        0.0, np.sin(phi + signature.knee_phase)
    )
    pose[:, j("right_knee"), 0] = signature.knee_base + signature.knee_amp * np.maximum(
        0.0, np.sin(phi + math.pi + signature.knee_phase)
    )
    pose[:, j("left_ankle"), 0] = signature.ankle_amp * np.sin(phi + signature.ankle_phase)
    pose[:, j("right_ankle"), 0] = signature.ankle_amp * np.sin(phi + math.pi + signature.ankle_phase)
    # arms: constant collar drop lowers them from the rest pose, shoulders
    # counter-swing the legs, elbows flex forward
    pose[:, j("left_collar"), 2] = -signature.arm_drop
    pose[:, j("right_collar"), 2] = signature.arm_drop
    pose[:, j("left_shoulder"), 0] = signature.arm_amp * np.sin(phi + math.pi + signature.arm_phase)
    pose[:, j("right_shoulder"), 0] = signature.arm_amp * np.sin(phi + signature.arm_phase)
    pose[:, j("left_elbow"), 0] = -(
        signature.elbow_base + signature.elbow_amp * 0.5 * (1.0 + np.sin(phi + math.pi + signature.arm_phase))
    )
    pose[:, j("right_elbow"), 0] = -(
        signature.elbow_base + signature.elbow_amp * 0.5 * (1.0 + np.sin(phi + signature.arm_phase))
    )
    pose[:, j("spine2"), 1] = signature.twist_amp * np.sin(phi)

    trans = np.zeros((num_frames, 3))
    trans[:, 0] = signature.sway_amp * np.sin(phi)
    trans[:, 1] = signature.bob_amp * np.sin(2.0 * phi)
    return SmplPoseSequence(pose=pose, betas=signature.betas, trans=trans)


def apply_clothing(
    frames: np.ndarray, level: int, rng: np.random.Generator, flip_fraction: float = 0.02
) -> np.ndarray:
    """Clothing proxy: dilate each mask by `level` pixels and flip a fraction
    of boundary pixels.  Level 0 is the identity (no dilation, no noise)."""
    if level == 0:
        return frames
    out = np.empty_like(frames)
    for idx in range(frames.shape[0]):
        mask = frames[idx].astype(bool)
        mask = ndimage.binary_dilation(mask, iterations=level)
        inner = mask & ~ndimage.binary_erosion(mask)
        outer = ndimage.binary_dilation(mask) & ~mask
        boundary = inner | outer
        flips = boundary & (rng.random(mask.shape) < flip_fraction)
        out[idx] = (mask ^ flips).astype(frames.dtype)
    return out


def render_sequence(
    poses: SmplPoseSequence,
    skeleton: Skeleton,
    view_deg: float,
    image_size: int,
) -> np.ndarray:
    positions = fk_sequence(poses.pose, skeleton, poses.trans)
    frames = np.stack(
        [project_silhouette(positions[i], view_deg, (image_size, image_size), skeleton) for i in range(len(positions))]
    )
    return frames


def _view_tag(view_deg: float) -> str:
    return f"v{int(round(view_deg)) % 360:03d}"


def _split_assignment(config: SynthConfig) -> dict[str, dict[str, str]]:
    """Per-identity, per-sequence split labels (train / query / gallery)."""
    ids = [f"id{i:04d}" for i in range(config.num_identities)]
    num_train = int(round(config.num_identities * config.train_fraction))
    assignment: dict[str, dict[str, str]] = {}
    for idx, identity in enumerate(ids):
        seq_names = [f"seq{s:02d}" for s in range(config.sequences_per_identity)]
        if idx < num_train:
            assignment[identity] = {seq: "train" for seq in seq_names}
            continue
        # queries prefer sequences whose (view, clothing) differ most from the
        # dataset's primary combination, giving cross-view/cross-clothing probes
        scores = []
        for s, seq in enumerate(seq_names):
            view, level = _sequence_condition(config, s)
            score = int(view != config.views_deg[0]) + int(level != config.clothing_levels[0])
            scores.append((score, s, seq))
        scores.sort(key=lambda item: (-item[0], -item[1]))
        num_query = min(config.queries_per_identity, len(seq_names) - 1)
        query_seqs = {seq for _, _, seq in scores[:num_query]}
        assignment[identity] = {seq: ("query" if seq in query_seqs else "gallery") for seq in seq_names}
    return assignment


def _sequence_condition(config: SynthConfig, seq_index: int) -> tuple[float, int]:
    view = config.views_deg[seq_index % len(config.views_deg)]
    level = config.clothing_levels[(seq_index // len(config.views_deg)) % len(config.clothing_levels)]
    return view, level


def write_mask_png(path: Path, mask: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255), mode="L").save(path)


def write_pose_jsonl(path: Path, poses: SmplPoseSequence) -> None:
    with open(path, "w") as fh:
        for i in range(poses.num_frames):
            record = {
                "pose": [float(v) for v in poses.pose[i].reshape(-1)],
                "betas": [float(v) for v in poses.betas],
                "trans": [float(v) for v in poses.trans[i]],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def generate_synthetic_dataset(config: SynthConfig, seed: int, out_dir: str | Path):
    """Write a full synthetic dataset under `out_dir` and return its index.

    Deterministic: identical (config, seed) produce byte-identical trees.
    """
    from .dataset import DatasetIndex, SequenceEntry, write_manifest, load_dataset

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    if not _writable(out):
        raise DataError(f"output directory {out} is not writable")

    base = default_skeleton()
    root_ss = np.random.SeedSequence(entropy=seed)
    identity_seeds = root_ss.spawn(config.num_identities)
    assignment = _split_assignment(config)

    entries: list[SequenceEntry] = []
    for idx in range(config.num_identities):
        identity = f"id{idx:04d}"
        id_rng = np.random.default_rng(identity_seeds[idx])
        signature = sample_signature(id_rng)
        skeleton = body_skeleton(signature, base)
        seq_seeds = identity_seeds[idx].spawn(config.sequences_per_identity)
        for s in range(config.sequences_per_identity):
            seq_name = f"seq{s:02d}"
            seq_rng = np.random.default_rng(seq_seeds[s])
            view, level = _sequence_condition(config, s)
            phase_offset = int(seq_rng.integers(0, max(1, config.frames_per_sequence // 2 + 1)))
            poses = build_pose_sequence(signature, config.frames_per_sequence, config.fps, phase_offset, base)
            frames = render_sequence(poses, skeleton, view, config.image_size)
            frames = apply_clothing(frames, level, seq_rng)

            seq_dir = out / identity / seq_name
            sil_dir = seq_dir / "sils"
            sil_dir.mkdir(parents=True, exist_ok=True)
            for i in range(frames.shape[0]):
                write_mask_png(sil_dir / f"{i:05d}.png", frames[i])
            write_pose_jsonl(seq_dir / "smpl.jsonl", poses)

            entries.append(
                SequenceEntry(
                    identity_id=identity,
                    sequence_id=seq_name,
                    view_tag=_view_tag(view),
                    clothing_tag=f"c{level}",
                    path=f"{identity}/{seq_name}",
                    num_frames=config.frames_per_sequence,
                    split=assignment[identity][seq_name],
                )
            )

    index = DatasetIndex(root=out, entries=entries, projection_view_deg=None)
    write_manifest(index)
    return load_dataset(out)


def _writable(path: Path) -> bool:
    import os

    return os.access(path, os.W_OK)

"""On-disk dataset layout, index loading, projection precompute, batching.

Layout (all paths relative to the dataset root):

    root/manifest.json                  splits, tags, active projection view
    root/<id>/<seq>/sils/%05d.png       capture silhouettes, 8-bit {0, 255}
    root/<id>/<seq>/smpl.jsonl          one line per frame: 72 pose floats,
                                        10 betas, 3 trans
    root/<id>/<seq>/proj/%05d.png       fixed-view projected silhouettes
"""

from __future__ import annotations

import json
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .skeleton import (
    Skeleton,
    SmplPoseSequence,
    default_skeleton,
    fk_sequence,
    project_silhouette,
)

MANIFEST_FORMAT_VERSION = 1
NETWORK_INPUT_SIZE = 64


@dataclass(frozen=True)
class SequenceEntry:
    identity_id: str
    sequence_id: str
    view_tag: str
    clothing_tag: str
    path: str  # relative to the dataset root
    num_frames: int
    split: str  # train | query | gallery

    @property
    def key(self) -> str:
        return f"{self.identity_id}/{self.sequence_id}"


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    entries: tuple[SequenceEntry, ...]
    projection_view_deg: float | None

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for e in self.entries:
            if e.num_frames < 1:
                raise DataError(f"sequence {e.key} has num_frames < 1")
            if e.split not in ("train", "query", "gallery"):
                raise DataError(f"sequence {e.key} has unknown split {e.split!r}")
            if e.key in seen:
                raise DataError(f"duplicate (identity, sequence) pair {e.key}")
            seen.add(e.key)
        query_ids = {e.identity_id for e in self.entries if e.split == "query"}
        gallery_ids = {e.identity_id for e in self.entries if e.split == "gallery"}
        missing = sorted(query_ids - gallery_ids)
        if missing:
            raise DataError(f"query identities absent from gallery: {', '.join(missing)}")

    def split_entries(self, split: str) -> list[SequenceEntry]:
        return [e for e in self.entries if e.split == split]

    def identities(self, split: str | None = None) -> list[str]:
        chosen = self.entries if split is None else self.split_entries(split)
        return sorted({e.identity_id for e in chosen})

    def sequence_dir(self, entry: SequenceEntry) -> Path:
        return self.root / entry.path


def write_manifest(index: DatasetIndex) -> None:
    data = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "projection_view_deg": index.projection_view_deg,
        "entries": [
            {
                "identity_id": e.identity_id,
                "sequence_id": e.sequence_id,
                "view_tag": e.view_tag,
                "clothing_tag": e.clothing_tag,
                "path": e.path,
                "num_frames": e.num_frames,
                "split": e.split,
            }
            for e in index.entries
        ],
    }
    (index.root / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_dataset(root: str | Path) -> DatasetIndex:
    """Read and validate the manifest plus every referenced sequence directory."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no manifest at {manifest_path}")
    try:
        data = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    if data.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise DataError(f"unsupported manifest format_version {data.get('format_version')!r}")

    entries = []
    for raw in data.get("entries", []):
        try:
            entry = SequenceEntry(
                identity_id=raw["identity_id"],
                sequence_id=raw["sequence_id"],
                view_tag=raw["view_tag"],
                clothing_tag=raw["clothing_tag"],
                path=raw["path"],
                num_frames=int(raw["num_frames"]),
                split=raw["split"],
            )
        except KeyError as exc:
            raise DataError(f"manifest entry missing field {exc}") from None
        entries.append(entry)

    index = DatasetIndex(root=root, entries=entries, projection_view_deg=data.get("projection_view_deg"))
    for entry in index.entries:
        seq_dir = index.sequence_dir(entry)
        sil_dir = seq_dir / "sils"
        pose_path = seq_dir / "smpl.jsonl"
        if not sil_dir.is_dir():
            raise DataError(f"missing silhouette directory {sil_dir}")
        if not pose_path.is_file():
            raise DataError(f"missing pose file {pose_path}")
        num_sils = len(sorted(sil_dir.glob("*.png")))
        if num_sils != entry.num_frames:
            raise DataError(
                f"{sil_dir}: found {num_sils} silhouettes but manifest declares {entry.num_frames}"
            )
        with open(pose_path) as fh:
            num_pose = sum(1 for line in fh if line.strip())
        if num_pose != entry.num_frames:
            raise DataError(
                f"{pose_path}: found {num_pose} pose frames but manifest declares {entry.num_frames}"
            )
    return index


def read_mask_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


def read_silhouettes(directory: Path, size: int = NETWORK_INPUT_SIZE) -> np.ndarray:
    """Ordered (N, size, size) {0,1} frames; resizes with nearest-neighbor
    only when the stored resolution differs."""
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise DataError(f"no silhouette frames in {directory}")
    frames = []
    for p in paths:
        mask = read_mask_png(p)
        if mask.shape != (size, size):
            img = Image.fromarray(mask * 255, mode="L").resize((size, size), Image.NEAREST)
            mask = (np.asarray(img) > 127).astype(np.uint8)
        frames.append(mask)
    stacked = np.stack(frames)
    if stacked.shape[0] < 1:
        raise DataError(f"empty silhouette sequence in {directory}")
    return stacked


def read_pose_sequence(path: Path) -> SmplPoseSequence:
    poses, trans, betas = [], [], None
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                poses.append(np.asarray(record["pose"], dtype=np.float64).reshape(24, 3))
                trans.append(np.asarray(record["trans"], dtype=np.float64))
                if betas is None:
                    betas = np.asarray(record["betas"], dtype=np.float64)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"corrupt pose file {path}: {exc}") from exc
    if not poses:
        raise DataError(f"pose file {path} contains no frames")
    try:
        return SmplPoseSequence(pose=np.stack(poses), betas=betas, trans=np.stack(trans))
    except ValueError as exc:
        raise DataError(f"corrupt pose file {path}: {exc}") from exc


def _project_one_sequence(args) -> str:
    root, rel_path, view_deg, skeleton_dict, image_size = args
    from .skeleton import Skeleton as _Skeleton

    skeleton = _Skeleton.from_dict(skeleton_dict)
    seq_dir = Path(root) / rel_path
    poses = read_pose_sequence(seq_dir / "smpl.jsonl")
    positions = fk_sequence(poses.pose, skeleton, poses.trans)
    proj_dir = seq_dir / "proj"
    proj_dir.mkdir(exist_ok=True)
    try:
        for i in range(positions.shape[0]):
            mask = project_silhouette(positions[i], view_deg, (image_size, image_size), skeleton)
            Image.fromarray(mask * 255, mode="L").save(proj_dir / f"{i:05d}.png")
    except Exception:
        shutil.rmtree(proj_dir, ignore_errors=True)
        raise
    return rel_path


def precompute_projections(
    index: DatasetIndex,
    view_angle_deg: float = 0.0,
    skeleton: Skeleton | None = None,
    workers: int = 1,
    progress=None,
) -> tuple[int, int]:
    """Render the fixed-view projected silhouettes beside every sequence.

    Idempotent: re-running with the same view rewrites identical bytes and
    skips sequences that are already complete.  Returns (rendered, skipped).
    The renderer intentionally uses the shared default skeleton so projections
    are normalized to a uniform body; on failure the partial `proj/` directory
    is removed before the error propagates.
    """
    skeleton = skeleton if skeleton is not None else default_skeleton()
    view_angle_deg = float(view_angle_deg)
    up_to_date = index.projection_view_deg is not None and index.projection_view_deg == view_angle_deg

    missing = [entry.key for entry in index.entries if not (index.sequence_dir(entry) / "smpl.jsonl").is_file()]
    if missing:
        raise DataError(f"missing pose files for sequences: {', '.join(missing)}")

    pending = []
    skipped = 0
    for entry in index.entries:
        proj_dir = index.sequence_dir(entry) / "proj"
        if up_to_date and proj_dir.is_dir() and len(list(proj_dir.glob("*.png"))) == entry.num_frames:
            skipped += 1
            continue
        pending.append(entry)

    skeleton_dict = skeleton.to_dict()
    jobs = [(str(index.root), e.path, view_angle_deg, skeleton_dict, NETWORK_INPUT_SIZE) for e in pending]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for done in pool.map(_project_one_sequence, jobs):
                if progress is not None:
                    progress(done)
    else:
        for job in jobs:
            try:
                done = _project_one_sequence(job)
            except DataError as exc:
                raise DataError(f"sequence {job[1]}: {exc}") from exc
            if progress is not None:
                progress(done)

    updated = replace(index, projection_view_deg=view_angle_deg)
    write_manifest(updated)
    return len(pending), skipped


class SequenceStore:
    """Caching loader for silhouettes, projections, and poses of one dataset."""

    def __init__(self, index: DatasetIndex, size: int = NETWORK_INPUT_SIZE):
        self.index = index
        self.size = size
        self._by_key = {e.key: e for e in index.entries}
        self._sils: dict[str, np.ndarray] = {}
        self._projs: dict[str, np.ndarray] = {}
        self._poses: dict[str, SmplPoseSequence] = {}

    def entry(self, key: str) -> SequenceEntry:
        return self._by_key[key]

    def silhouettes(self, key: str) -> np.ndarray:
        if key not in self._sils:
            self._sils[key] = read_silhouettes(self.index.sequence_dir(self.entry(key)) / "sils", self.size)
        return self._sils[key]

    def projections(self, key: str) -> np.ndarray:
        if key not in self._projs:
            proj_dir = self.index.sequence_dir(self.entry(key)) / "proj"
            if not proj_dir.is_dir():
                raise DataError(
                    f"sequence {key} has no projected silhouettes; run the `project` command first"
                )
            self._projs[key] = read_silhouettes(proj_dir, self.size)
        return self._projs[key]

    def poses(self, key: str) -> SmplPoseSequence:
        if key not in self._poses:
            self._poses[key] = read_pose_sequence(self.index.sequence_dir(self.entry(key)) / "smpl.jsonl")
        return self._poses[key]


@dataclass(frozen=True)
class Batch:
    """P identities x K sequences x T ordered frames, flattened to P*K rows."""

    silhouettes: np.ndarray  # (P*K, T, 64, 64) float32 in {0, 1}
    projections: np.ndarray  # (P*K, T, 64, 64) float32
    poses: np.ndarray  # (P*K, T, 24, 3) float32
    labels: np.ndarray  # (P*K,) int64, identity indices
    P: int
    K: int

    def __post_init__(self):
        n = self.P * self.K
        if self.silhouettes.shape[0] != n or self.labels.shape != (n,):
            raise ValueError("batch arrays disagree with P*K")
        values, counts = np.unique(self.labels, return_counts=True)
        if len(values) != self.P or not np.all(counts == self.K):
            raise ValueError("batch must hold exactly K sequences for each of P identities")


def _window_indices(length: int, T: int, rng: np.random.Generator) -> np.ndarray:
    if length >= T:
        start = int(rng.integers(0, length - T + 1))
        return np.arange(start, start + T)
    start = int(rng.integers(0, length))
    return (start + np.arange(T)) % length


def sample_batch(
    index: DatasetIndex,
    P: int,
    K: int,
    T: int,
    rng: np.random.Generator,
    store: SequenceStore | None = None,
) -> Batch:
    """Draw a P x K x T training batch from the train split.

    Identities are drawn without replacement; sequences per identity with
    replacement only when the identity has fewer than K; frames are a
    contiguous ordered window, wrapping cyclically for short sequences.
    """
    if P < 1 or K < 1 or T < 1:
        raise ValueError("P, K and T must be positive")
    store = store if store is not None else SequenceStore(index)
    train_ids = index.identities("train")
    if len(train_ids) < P:
        raise ValueError(f"need at least {P} train identities, found {len(train_ids)}")
    by_identity: dict[str, list[SequenceEntry]] = {}
    for e in index.split_entries("train"):
        by_identity.setdefault(e.identity_id, []).append(e)
    for seqs in by_identity.values():
        seqs.sort(key=lambda e: e.sequence_id)

    chosen_ids = [train_ids[i] for i in rng.choice(len(train_ids), size=P, replace=False)]
    sils, projs, poses, labels = [], [], [], []
    for identity in chosen_ids:
        seqs = by_identity[identity]
        if len(seqs) >= K:
            picks = [seqs[i] for i in rng.choice(len(seqs), size=K, replace=False)]
        else:
            picks = [seqs[i] for i in rng.integers(0, len(seqs), size=K)]
        for entry in picks:
            frames = store.silhouettes(entry.key)
            window = _window_indices(frames.shape[0], T, rng)
            sils.append(frames[window])
            projs.append(store.projections(entry.key)[window])
            poses.append(store.poses(entry.key).pose[window])
            labels.append(train_ids.index(identity))

    return Batch(
        silhouettes=np.stack(sils).astype(np.float32),
        projections=np.stack(projs).astype(np.float32),
        poses=np.stack(poses).astype(np.float32),
        labels=np.asarray(labels, dtype=np.int64),
        P=P,
        K=K,
    )

"""Open-set instance retrieval: embedding extraction, pairwise distances,
and the Rank-1 / Rank-5 / mAP / mINP metrics.

Each query ranks the gallery by ascending Euclidean distance over the
L2-normalized flattened part embeddings; distance ties break on the gallery
sequence key so storage order never affects a metric.  AP averages precision
at every relevant rank; INP is the number of relevant items divided by the
rank of the last (hardest) one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetIndex, SequenceStore
from .errors import DataError

EMBEDDINGS_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1
_UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class EmbeddingSet:
    vectors: np.ndarray  # (M, D), unit rows
    identity_ids: tuple[str, ...]
    sequence_ids: tuple[str, ...]  # qualified "identity/sequence" keys
    role: str

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "identity_ids", tuple(self.identity_ids))
        object.__setattr__(self, "sequence_ids", tuple(self.sequence_ids))
        m = vectors.shape[0]
        if vectors.ndim != 2 or m < 1:
            raise ValueError("vectors must be a nonempty (M, D) array")
        if len(self.identity_ids) != m or len(self.sequence_ids) != m:
            raise ValueError("labels and vectors disagree in length")
        if any(not i for i in self.identity_ids) or any(not s for s in self.sequence_ids):
            raise ValueError("identity and sequence ids must be nonempty strings")
        if len(set(self.sequence_ids)) != m:
            raise ValueError("sequence ids must be unique within a set")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_NORM_TOL):
            raise ValueError("vectors must be L2-normalized to unit length")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def l2_normalize(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero vector")
    return vectors / norms


def distance_matrix(query: np.ndarray, gallery: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Pairwise Euclidean distances, (M_q, D) x (M_g, D) -> (M_q, M_g)."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ValueError(f"dimension mismatch: {query.shape} vs {gallery.shape}")
    out = np.empty((query.shape[0], gallery.shape[0]))
    for start in range(0, query.shape[0], chunk):
        block = query[start : start + chunk]
        out[start : start + chunk] = np.linalg.norm(block[:, None, :] - gallery[None, :, :], axis=-1)
    return out


@dataclass(frozen=True)
class MetricsReport:
    rank1: float
    rank5: float
    mAP: float
    mINP: float
    per_query: tuple[dict, ...]

    def __post_init__(self):
        for name in ("rank1", "rank5", "mAP", "mINP"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} = {value} outside [0, 1]")
        if self.rank1 > self.rank5 + 1e-12:
            raise ValueError("rank1 cannot exceed rank5")

    def summary(self) -> dict:
        return {"rank1": self.rank1, "rank5": self.rank5, "mAP": self.mAP, "mINP": self.mINP}

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            **self.summary(),
            "per_query": list(self.per_query),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate(query: EmbeddingSet, gallery: EmbeddingSet) -> MetricsReport:
    """Rank every gallery item per query and aggregate the four metrics."""
    overlap = set(query.sequence_ids) & set(gallery.sequence_ids)
    if overlap:
        raise DataError(f"sequences present in both query and gallery: {sorted(overlap)[:5]}")
    gallery_ids = np.asarray(gallery.identity_ids)
    gallery_keys = np.asarray(gallery.sequence_ids)
    missing = sorted(set(query.identity_ids) - set(gallery.identity_ids))
    if missing:
        raise DataError(f"query identities with no gallery match: {', '.join(missing)}")
    if query.dim != gallery.dim:
        raise ValueError(f"embedding dims disagree: {query.dim} vs {gallery.dim}")

    dist = distance_matrix(query.vectors, gallery.vectors)
    rows = []
    r1 = r5 = ap_sum = inp_sum = 0.0
    for qi in range(len(query.sequence_ids)):
        order = np.lexsort((gallery_keys, dist[qi]))
        matches = gallery_ids[order] == query.identity_ids[qi]
        relevant = np.flatnonzero(matches)
        ranks = relevant + 1  # 1-based ranks of correct items
        precisions = np.arange(1, len(ranks) + 1) / ranks
        ap = float(precisions.mean())
        inp = float(len(ranks) / ranks[-1])
        first = int(ranks[0])
        r1 += first == 1
        r5 += first <= 5
        ap_sum += ap
        inp_sum += inp
        rows.append(
            {
                "sequence_id": query.sequence_ids[qi],
                "identity_id": query.identity_ids[qi],
                "first_match_rank": first,
                "num_relevant": int(len(ranks)),
                "ap": ap,
                "inp": inp,
            }
        )
    n = len(rows)
    return MetricsReport(
        rank1=r1 / n, rank5=r5 / n, mAP=ap_sum / n, mINP=inp_sum / n, per_query=tuple(rows)
    )


def extract_embeddings(model, index: DatasetIndex, split: str, store: SequenceStore | None = None) -> EmbeddingSet:
    """Full-sequence inference per entry of `split`; flattened, L2-normalized
    part embeddings."""
    entries = index.split_entries(split)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    store = store if store is not None else SequenceStore(index)
    model.eval()
    vectors, identities, keys = [], [], []
    with torch.no_grad():
        for entry in entries:
            sils = torch.from_numpy(store.silhouettes(entry.key).astype(np.float32)).unsqueeze(0)
            projs = torch.from_numpy(store.projections(entry.key).astype(np.float32)).unsqueeze(0)
            poses = torch.from_numpy(store.poses(entry.key).pose.astype(np.float32)).unsqueeze(0)
            parts = model.embed(sils, projs, poses)
            vectors.append(parts.reshape(-1).numpy().astype(np.float64))
            identities.append(entry.identity_id)
            keys.append(entry.key)
    return EmbeddingSet(
        vectors=l2_normalize(np.stack(vectors)),
        identity_ids=tuple(identities),
        sequence_ids=tuple(keys),
        role=split,
    )


def save_embeddings(path: str | Path, embeddings: EmbeddingSet) -> None:
    """JSON-lines: a header record, then one record per sequence."""
    with open(path, "w") as fh:
        header = {"format_version": EMBEDDINGS_FORMAT_VERSION, "dim": embeddings.dim, "role": embeddings.role}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for key, identity, vec in zip(embeddings.sequence_ids, embeddings.identity_ids, embeddings.vectors):
            record = {
                "sequence_id": key,
                "identity_id": identity,
                "role": embeddings.role,
                "embedding": [float(v) for v in vec],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_embeddings(path: str | Path) -> EmbeddingSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"embedding file not found: {path}")
    with open(path) as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise DataError(f"embedding file {path} is empty")
    try:
        header = json.loads(lines[0])
        if header.get("format_version") != EMBEDDINGS_FORMAT_VERSION:
            raise DataError(f"unsupported embeddings format_version in {path}")
        vectors, identities, keys, roles = [], [], [], []
        for line in lines[1:]:
            record = json.loads(line)
            vectors.append(record["embedding"])
            identities.append(record["identity_id"])
            keys.append(record["sequence_id"])
            roles.append(record["role"])
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"malformed embedding file {path}: {exc}") from exc
    if not vectors:
        raise DataError(f"embedding file {path} has no records")
    role = roles[0] if roles else header.get("role", "unknown")
    try:
        return EmbeddingSet(np.asarray(vectors, dtype=np.float64), tuple(identities), tuple(keys), role)
    except ValueError as exc:
        raise DataError(f"invalid embeddings in {path}: {exc}") from exc

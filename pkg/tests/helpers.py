"""Shared test oracles: independent implementations kept deliberately naive."""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy.spatial.transform import Rotation


def fk_matrix_chain_oracle(pose: np.ndarray, skeleton, trans: np.ndarray) -> np.ndarray:
    """Brute-force forward kinematics: re-walks the full ancestor chain per
    joint with scipy rotation matrices."""
    n = skeleton.num_joints
    rotations = [Rotation.from_rotvec(pose[j]).as_matrix() for j in range(n)]
    positions = np.zeros((n, 3))
    for j in range(n):
        path = [j]
        while skeleton.parent_index[path[0]] != -1:
            path.insert(0, skeleton.parent_index[path[0]])
        pos = np.asarray(trans, dtype=np.float64) + skeleton.bone_offset[path[0]]
        acc = rotations[path[0]]
        for node in path[1:]:
            pos = pos + acc @ skeleton.bone_offset[node]
            acc = acc @ rotations[node]
        positions[j] = pos
    return positions


def alignment_oracle(layout, h: int, w: int, k: int) -> np.ndarray:
    """Sort all joint distances per region, ties resolved by lower index."""
    scaled = [(hj * h / layout.H, wj * w / layout.W) for hj, wj in layout.coords]
    omega = np.zeros((h * w, len(scaled)), dtype=np.uint8)
    for r in range(h * w):
        rr, cc = divmod(r, w)
        ranked = sorted(((rr - sh) ** 2 + (cc - sw) ** 2, j) for j, (sh, sw) in enumerate(scaled))
        for _, j in ranked[:k]:
            omega[r, j] = 1
    return omega


def retrieval_oracle(query_vecs, query_ids, gallery_vecs, gallery_ids, gallery_keys, max_rank=5):
    """Recompute every retrieval metric with explicit sorting and counting."""
    per_query = []
    for q, qid in zip(query_vecs, query_ids):
        dists = []
        for g in gallery_vecs:
            acc = 0.0
            for a, b in zip(q, g):
                acc += (a - b) ** 2
            dists.append(math.sqrt(acc))
        order = sorted(range(len(dists)), key=lambda i: (dists[i], gallery_keys[i]))
        match_ranks = [rank + 1 for rank, i in enumerate(order) if gallery_ids[i] == qid]
        precisions = [(n + 1) / rank for n, rank in enumerate(match_ranks)]
        per_query.append(
            {
                "first": match_ranks[0],
                "ap": sum(precisions) / len(precisions),
                "inp": len(match_ranks) / match_ranks[-1],
                "precision_at_last": precisions[-1],
            }
        )
    n = len(per_query)
    return {
        "rank1": sum(row["first"] == 1 for row in per_query) / n,
        "rank5": sum(row["first"] <= max_rank for row in per_query) / n,
        "mAP": sum(row["ap"] for row in per_query) / n,
        "mINP": sum(row["inp"] for row in per_query) / n,
        "per_query": per_query,
    }


def max_relative_gradient_error(make_loss, tensors, eps: float = 1e-6, max_coords: int = 16, seed: int = 0):
    """Compare autograd gradients of make_loss() against central finite
    differences on up to max_coords coordinates per tensor.

    Tensors must be float64 leaves with requires_grad=True.  Coordinates where
    both gradients are below 1e-7 in magnitude count as exact.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    loss = make_loss()
    loss.backward()
    worst = 0.0
    for t in tensors:
        grad = t.grad
        assert grad is not None, "tensor received no gradient"
        numel = t.numel()
        if numel <= max_coords:
            flat_indices = np.arange(numel)
        else:
            flat_indices = rng.choice(numel, size=max_coords, replace=False)
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in flat_indices:
            original = flat[idx].item()
            flat[idx] = original + eps
            f_plus = make_loss().item()
            flat[idx] = original - eps
            f_minus = make_loss().item()
            flat[idx] = original
            fd = (f_plus - f_minus) / (2.0 * eps)
            analytic = gflat[idx].item()
            if abs(fd) < 1e-7 and abs(analytic) < 1e-7:
                continue
            worst = max(worst, abs(analytic - fd) / max(abs(analytic), abs(fd)))
    return worst


def unit_circle_embeddings(angles):
    """Angles -> unit 2-vectors; chord distance is monotone in angular gap."""
    angles = np.asarray(angles, dtype=np.float64)
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def random_unit_vectors(rng, count, dim):
    vecs = rng.normal(size=(count, dim))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def to_double(module: torch.nn.Module) -> torch.nn.Module:
    return module.double()

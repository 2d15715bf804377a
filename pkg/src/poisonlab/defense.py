"""Filtering defenses: sample-wise alignment filtering (bypassable) and
set-based repeated-pattern detection across the dataset."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backends.base import ConfigError
from .core import Dataset, Image
from .detection import (BoxProposer, Embedder, ToyEmbedder,
                        UniquePatchProposer, cosine)
from .metrics import HashJointEmbedder

Box = tuple[int, int, int, int]


@dataclass(frozen=True)
class FilterVerdict:
    sample_id: str
    flagged: bool
    reason: str = "none"  # none | low_alignment | repeated_pattern
    box: Optional[Box] = None
    cluster_id: Optional[int] = None
    score: Optional[float] = None

    def __post_init__(self):
        if self.flagged and self.reason == "none":
            raise ConfigError("flagged verdicts need a reason")

    def to_row(self) -> dict:
        return {"sample_id": self.sample_id, "flagged": self.flagged,
                "reason": self.reason, "box": list(self.box) if self.box else None,
                "cluster_id": self.cluster_id, "score": self.score}


def samplewise_filter(dataset: Dataset, joint: HashJointEmbedder | None = None,
                      align_threshold: float = 0.0) -> list[FilterVerdict]:
    """Flag samples whose image-caption alignment falls below the threshold.

    The per-sample analog of CLIP-score filtering; small in-mask edits
    barely move the image embedding, which is exactly why this defense is
    bypassable."""
    if not (-1.0 <= align_threshold <= 1.0):
        raise ConfigError(f"align_threshold must be in [-1,1], got {align_threshold}")
    joint = joint or HashJointEmbedder()
    verdicts = []
    for s in dataset:
        a = joint.align(s.image, s.caption)
        if a < align_threshold:
            verdicts.append(FilterVerdict(s.id, True, "low_alignment", score=a))
        else:
            verdicts.append(FilterVerdict(s.id, False, score=a))
    return verdicts


def setbased_filter(dataset: Dataset, proposer: BoxProposer | None = None,
                    embedder: Embedder | None = None,
                    sim_threshold: float = 0.9, min_cluster: int = 3,
                    proposer_threshold: float = 0.5) -> list[FilterVerdict]:
    """Cross-image repeated-pattern detection.

    Per image, propose locally-distinctive candidate regions; embed them;
    single-linkage cluster regions across images whose pairwise similarity
    exceeds sim_threshold; flag every member of a cluster spanning at
    least min_cluster distinct images. Deterministic given its inputs.
    """
    if min_cluster < 2:
        raise ConfigError("min_cluster must be >= 2")
    proposer = proposer or UniquePatchProposer(window=8, stride=2, max_proposals=16)
    embedder = embedder or ToyEmbedder(grid=8, color=True)

    regions: list[tuple[str, Box, np.ndarray]] = []  # (sample_id, box, embedding)
    for s in sorted(dataset, key=lambda s: s.id):  # order-independent verdicts
        rgb = s.image.rgb()
        for prop in proposer.propose(s.image, proposer_threshold)[:16]:
            x0, y0, x1, y1 = prop.box
            emb = embedder.embed(Image(rgb[y0:y1, x0:x1], id=f"{s.id}_{prop.box}"))
            regions.append((s.id, prop.box, emb))

    # single-linkage over the similarity graph via union-find
    parent = list(range(len(regions)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if regions:
        embs = np.stack([r[2] for r in regions])
        sims = embs @ embs.T
        for i in range(len(regions)):
            for j in range(i + 1, len(regions)):
                if regions[i][0] != regions[j][0] and sims[i, j] > sim_threshold:
                    parent[find(i)] = find(j)

    clusters: dict[int, list[int]] = {}
    for i in range(len(regions)):
        clusters.setdefault(find(i), []).append(i)

    flagged: dict[str, tuple[int, Box, float]] = {}
    cluster_ids = {}
    for root, members in sorted(clusters.items()):
        distinct = {regions[i][0] for i in members}
        if len(distinct) >= min_cluster:
            cid = cluster_ids.setdefault(root, len(cluster_ids))
            for i in members:
                sid, box, _ = regions[i]
                best = float(max(
                    (np.dot(regions[i][2], regions[j][2])
                     for j in members if regions[j][0] != sid), default=0.0))
                prev = flagged.get(sid)
                if prev is None or best > prev[2]:
                    flagged[sid] = (cid, box, best)

    verdicts = []
    for s in dataset:
        hit = flagged.get(s.id)
        if hit is not None:
            cid, box, score = hit
            verdicts.append(FilterVerdict(s.id, True, "repeated_pattern",
                                          box=box, cluster_id=cid, score=score))
        else:
            verdicts.append(FilterVerdict(s.id, False))
    return verdicts


def combined_report(samplewise: list[FilterVerdict],
                    setbased: list[FilterVerdict]) -> list[FilterVerdict]:
    """Union of the two verdict sets with reasons preserved (sample-wise
    reason wins only when the set-based pass did not flag)."""
    by_id = {v.sample_id: v for v in samplewise}
    out = []
    for v in setbased:
        if v.flagged:
            out.append(v)
        else:
            out.append(by_id.get(v.sample_id, v))
    return out

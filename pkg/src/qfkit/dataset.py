"""Dataset preparation: ground-truth masks, face clustering, leakage-free splits.

Masks are thresholded absolute differences between a real frame and its
manipulated counterpart. Splits are assigned per face cluster, never per
frame, so the same subject cannot appear on both sides of a train/test
boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

DEFAULT_MASK_THRESHOLD = 25
DEFAULT_HASH_THRESHOLD = 0.15
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class FramePair:
    """A real frame and, for fakes, the manipulated frame derived from it."""

    frame_id: str
    real_path: Path
    fake_path: Path | None = None

    @property
    def is_fake(self) -> bool:
        return self.fake_path is not None


@dataclass(frozen=True)
class ManifestRecord:
    frame_id: str
    cluster_id: int
    split: str
    mask_path: str | None = None


@dataclass
class DatasetManifest:
    """Split assignment for every frame; one cluster never straddles splits."""

    records: list[ManifestRecord]
    ratios: tuple[float, float, float]

    def split_of(self, frame_id: str) -> str:
        return {r.frame_id: r.split for r in self.records}[frame_id]

    def clusters_by_split(self) -> dict[str, set[int]]:
        out: dict[str, set[int]] = {s: set() for s in SPLITS}
        for r in self.records:
            out[r.split].add(r.cluster_id)
        return out

    def to_dict(self) -> dict:
        return {
            "ratios": list(self.ratios),
            "records": [
                {
                    "frame_id": r.frame_id,
                    "cluster_id": r.cluster_id,
                    "split": r.split,
                    "mask_path": r.mask_path,
                }
                for r in self.records
            ],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8") as f:
            d = json.load(f)
        return cls(
            records=[ManifestRecord(**r) for r in d["records"]],
            ratios=tuple(d["ratios"]),
        )


def make_mask(real: np.ndarray, fake: np.ndarray, threshold: int = DEFAULT_MASK_THRESHOLD) -> np.ndarray:
    """Binary manipulation mask: 1 where any channel differs by more than threshold.

    A plain absolute difference would flag every pixel touched by compression
    noise, hence the threshold (0-255 units).
    """
    real = np.asarray(real)
    fake = np.asarray(fake)
    if real.shape != fake.shape:
        raise DataError(f"frame dimensions differ: {real.shape} vs {fake.shape}")
    diff = np.abs(real.astype(np.int16) - fake.astype(np.int16))
    if diff.ndim == 3:
        diff = diff.max(axis=2)
    return (diff > threshold).astype(np.uint8)


def average_hash(image: np.ndarray) -> int:
    """64-bit perceptual hash: 8x8 area-mean grayscale thresholded at its mean."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    if img.ndim != 2 or img.shape[0] == 0 or img.shape[1] == 0:
        raise DataError(f"cannot hash image of shape {np.asarray(image).shape}")
    small = _resample_8x8(img)
    bits = (small > small.mean()).ravel()
    out = 0
    for bit in bits:
        out = (out << 1) | int(bit)
    return out


def _resample_axis(img: np.ndarray, axis: int) -> np.ndarray:
    n = img.shape[axis]
    if n >= 8:
        edges = (np.arange(9) * n) // 8
        sums = np.add.reduceat(img, edges[:-1], axis=axis)
        widths = np.diff(edges)
        shape = [1, 1]
        shape[axis] = 8
        return sums / widths.reshape(shape)
    idx = (np.arange(8) * n) // 8
    return np.take(img, idx, axis=axis)


def _resample_8x8(img: np.ndarray) -> np.ndarray:
    return _resample_axis(_resample_axis(img, 0), 1)


def hash_distance(a: int, b: int) -> float:
    """Normalized Hamming distance between two 64-bit hashes, in [0, 1]."""
    return bin((a ^ b) & (1 << 64) - 1).count("1") / 64.0


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # Smaller id stays root, so components have order-independent roots.
            self.parent[max(ra, rb)] = min(ra, rb)


def cluster_faces(
    frames: dict[str, np.ndarray | str | Path],
    threshold: float = DEFAULT_HASH_THRESHOLD,
) -> dict[str, int]:
    """Group visually similar frames; returns frame_id -> dense cluster id.

    Similarity is normalized Hamming distance between 64-bit average hashes;
    frames within ``threshold`` are merged via union-find. Cluster ids are
    dense from 0, ordered by each cluster's smallest frame id, so the
    partition does not depend on input order.
    """
    if not frames:
        raise DataError("no frames to cluster")
    hashes: dict[str, int] = {}
    for frame_id in sorted(frames):
        src = frames[frame_id]
        if isinstance(src, (str, Path)):
            from .runtime import load_image

            src = load_image(src)
        hashes[frame_id] = average_hash(src)

    ids = sorted(hashes)
    uf = _UnionFind(ids)
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            if hash_distance(hashes[a], hashes[b]) <= threshold:
                uf.union(a, b)

    roots: dict[str, list[str]] = {}
    for frame_id in ids:
        roots.setdefault(uf.find(frame_id), []).append(frame_id)
    clusters = sorted(roots.values(), key=lambda members: min(members))
    return {fid: ci for ci, members in enumerate(clusters) for fid in members}


def split_dataset(
    clusters: dict[str, int],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetManifest:
    """Assign whole clusters to train/val/test, largest cluster first.

    Each cluster goes to the split currently furthest below its frame quota
    (ties broken by a seeded shuffle of split order), so every split lands
    within one largest-cluster-size of its target and no cluster straddles
    splits.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)}")
    members: dict[int, list[str]] = {}
    for frame_id, cid in clusters.items():
        members.setdefault(cid, []).append(frame_id)
    if len(members) < 3:
        raise DataError(f"need at least 3 clusters to fill all splits, got {len(members)}")

    total = len(clusters)
    targets = {s: r * total for s, r in zip(SPLITS, ratios)}
    assigned = {s: 0 for s in SPLITS}
    rng = np.random.default_rng(seed)
    tiebreak = list(rng.permutation(len(SPLITS)))
    order = sorted(members, key=lambda cid: (-len(members[cid]), cid))

    assignment: dict[int, str] = {}
    for cid in order:
        deficits = {s: targets[s] - assigned[s] for s in SPLITS}
        split = max(SPLITS, key=lambda s: (deficits[s], -tiebreak[SPLITS.index(s)]))
        assignment[cid] = split
        assigned[split] += len(members[cid])

    records = [
        ManifestRecord(frame_id=fid, cluster_id=cid, split=assignment[cid])
        for cid in sorted(members)
        for fid in sorted(members[cid])
    ]
    return DatasetManifest(records=records, ratios=tuple(float(r) for r in ratios))


def discover_pairs(real_dir, fake_dir=None, extensions=(".png", ".ppm")) -> list[FramePair]:
    """Pair real and fake frames by filename stem; unmatched reals stay real-only."""
    real_dir = Path(real_dir)
    if not real_dir.is_dir():
        raise DataError(f"real frame directory {real_dir} does not exist")
    fakes: dict[str, Path] = {}
    if fake_dir is not None:
        fake_dir = Path(fake_dir)
        if not fake_dir.is_dir():
            raise DataError(f"fake frame directory {fake_dir} does not exist")
        for p in sorted(fake_dir.iterdir()):
            if p.suffix.lower() in extensions:
                fakes[p.stem] = p
    pairs = []
    for p in sorted(real_dir.iterdir()):
        if p.suffix.lower() in extensions:
            pairs.append(FramePair(frame_id=p.stem, real_path=p, fake_path=fakes.get(p.stem)))
    if not pairs:
        raise DataError(f"no frames found under {real_dir}")
    return pairs

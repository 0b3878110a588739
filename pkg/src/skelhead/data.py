"""Skeleton sequences, the joint graph, the on-disk dataset format and a
synthetic generator of ambiguous action pairs."""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "SkeletonSequence",
    "SkeletonGraph",
    "DatasetManifest",
    "DatasetError",
    "BadMagicError",
    "TruncatedError",
    "LabelRangeError",
    "NonFiniteDataError",
    "DegenerateClassPairError",
    "adjacency_normalize",
    "normalize_sequence",
    "save_dataset",
    "load_dataset",
    "PairSpec",
    "SynthConfig",
    "synth_generate",
    "STICK_EDGES",
    "STICK_JOINTS",
    "to_batch",
    "class_groups",
    "stratified_split",
]

MAGIC = b"SKL1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4I")

STICK_JOINTS = (
    "root",
    "spine",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "r_hip",
)
STICK_EDGES = ((0, 1), (1, 2), (1, 3), (3, 4), (4, 5), (1, 6), (6, 7), (7, 8), (0, 9), (0, 10))


class DatasetError(ValueError):
    """Base class for dataset validation failures."""


class BadMagicError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class NonFiniteDataError(DatasetError):
    pass


class DegenerateClassPairError(ValueError):
    pass


@dataclass
class SkeletonSequence:
    coords: np.ndarray  # (3, T, V), meters
    label: int
    source_id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float32)
        if self.coords.ndim != 3 or self.coords.shape[0] != 3:
            raise ValueError(f"coords must be (3, T, V), got {self.coords.shape}")
        _, t, v = self.coords.shape
        if t < 1 or v < 2:
            raise ValueError(f"need T >= 1 and V >= 2, got T={t} V={v}")
        if not np.all(np.isfinite(self.coords)):
            raise NonFiniteDataError(f"sample {self.source_id!r} has non-finite coordinates")

    @property
    def T(self) -> int:
        return self.coords.shape[1]

    @property
    def V(self) -> int:
        return self.coords.shape[2]


@dataclass
class SkeletonGraph:
    V: int
    edges: tuple[tuple[int, int], ...]
    A_norm: np.ndarray

    @classmethod
    def from_edges(cls, edges: Sequence[Sequence[int]], V: int) -> "SkeletonGraph":
        edges = tuple((int(i), int(j)) for i, j in edges)
        return cls(V, edges, adjacency_normalize(edges, V))


@dataclass
class DatasetManifest:
    class_names: list[str]
    V: int
    T_target: int
    edges: list[tuple[int, int]]
    count: int = 0

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise DatasetError("class names must be unique")
        if self.T_target < 8:
            raise DatasetError(f"T_target must be >= 8, got {self.T_target}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "class_names": list(self.class_names),
            "V": self.V,
            "T_target": self.T_target,
            "edges": [list(e) for e in self.edges],
            "count": self.count,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        keys = {"format_version", "class_names", "V", "T_target", "edges", "count"}
        if set(obj) != keys:
            raise DatasetError(f"manifest keys {sorted(obj)} != {sorted(keys)}")
        if obj["format_version"] != FORMAT_VERSION:
            raise DatasetError(f"unsupported format_version {obj['format_version']}")
        return cls(
            class_names=list(obj["class_names"]),
            V=int(obj["V"]),
            T_target=int(obj["T_target"]),
            edges=[(int(i), int(j)) for i, j in obj["edges"]],
            count=int(obj["count"]),
        )

    @property
    def graph(self) -> SkeletonGraph:
        return SkeletonGraph.from_edges(self.edges, self.V)


def adjacency_normalize(edges: Sequence[Sequence[int]], V: int) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 for an undirected edge list (self-loops added here)."""
    a = np.eye(V)
    seen: set[tuple[int, int]] = set()
    for i, j in edges:
        if not (0 <= i < V and 0 <= j < V):
            raise ValueError(f"edge ({i}, {j}) out of range for V={V}")
        if i == j:
            raise ValueError(f"self-loop ({i}, {j}) in edge list")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise ValueError(f"duplicate edge {key}")
        seen.add(key)
        a[i, j] = a[j, i] = 1.0
    if not _connected(a):
        warnings.warn("skeleton graph is not connected", stacklevel=2)
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def _connected(a: np.ndarray) -> bool:
    V = a.shape[0]
    reached = {0}
    frontier = [0]
    while frontier:
        u = frontier.pop()
        for w in np.nonzero(a[u])[0]:
            if int(w) not in reached:
                reached.add(int(w))
                frontier.append(int(w))
    return len(reached) == V


def normalize_sequence(s: SkeletonSequence, root_joint: int, T_target: int) -> SkeletonSequence:
    """Center on the root joint per frame and resample to ``T_target`` frames."""
    c, t, v = s.coords.shape
    if not 0 <= root_joint < v:
        raise ValueError(f"root joint {root_joint} out of range for V={v}")
    x = s.coords.astype(np.float64)
    x = x - x[:, :, root_joint : root_joint + 1]
    if t != T_target:
        if t == 1:
            x = np.repeat(x, T_target, axis=1)
        else:
            pos = np.linspace(0.0, t - 1, T_target)
            lo = np.clip(np.floor(pos).astype(int), 0, t - 2)
            frac = (pos - lo)[None, :, None]
            x = x[:, lo, :] * (1.0 - frac) + x[:, lo + 1, :] * frac
    return SkeletonSequence(x.astype(np.float32), s.label, s.source_id)


def to_batch(seqs: Sequence[SkeletonSequence], root_joint: int, T_target: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalize and stack sequences into (N, 3, T_target, V) float32 plus labels."""
    xs = [normalize_sequence(s, root_joint, T_target).coords for s in seqs]
    return np.stack(xs).astype(np.float32), np.array([s.label for s in seqs], dtype=np.int64)


def stratified_split(labels: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        idx = idx[rng.permutation(idx.size)]
        k = int(round(idx.size * test_fraction))
        test.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


# ---------------------------------------------------------------------------
# Binary format
# ---------------------------------------------------------------------------


def save_dataset(path: str | Path, manifest: DatasetManifest, seqs: Sequence[SkeletonSequence]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest.count = len(seqs)
    _validate(manifest, seqs)
    chunks = [MAGIC]
    for s in seqs:
        c, t, v = s.coords.shape
        chunks.append(_HEADER.pack(s.label, t, v, c))
        chunks.append(np.ascontiguousarray(s.coords, dtype="<f4").tobytes())
    (path / "data.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> tuple[DatasetManifest, list[SkeletonSequence]]:
    path = Path(path)
    manifest = DatasetManifest.from_json(json.loads((path / "manifest.json").read_text(encoding="utf-8")))
    raw = (path / "data.bin").read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r} in {path / 'data.bin'}")
    off = 4
    seqs: list[SkeletonSequence] = []
    for i in range(manifest.count):
        if off + _HEADER.size > len(raw):
            raise TruncatedError(f"truncated header for sample {i}")
        label, t, v, c = _HEADER.unpack_from(raw, off)
        off += _HEADER.size
        if c != 3 or v != manifest.V:
            raise DatasetError(f"sample {i}: shape C={c} V={v} disagrees with manifest V={manifest.V}")
        if t < 1:
            raise DatasetError(f"sample {i}: T must be >= 1")
        nbytes = 4 * c * t * v
        if off + nbytes > len(raw):
            raise TruncatedError(f"truncated payload for sample {i}")
        coords = np.frombuffer(raw, dtype="<f4", count=c * t * v, offset=off).reshape(c, t, v)
        off += nbytes
        if label >= manifest.num_classes:
            raise LabelRangeError(f"sample {i}: label {label} >= class count {manifest.num_classes}")
        if not np.all(np.isfinite(coords)):
            raise NonFiniteDataError(f"sample {i}: non-finite coordinate")
        seqs.append(SkeletonSequence(coords.astype(np.float32), int(label), f"{path.name}:{i}"))
    if off != len(raw):
        raise DatasetError(f"{len(raw) - off} trailing bytes after {manifest.count} samples")
    return manifest, seqs


def _validate(manifest: DatasetManifest, seqs: Sequence[SkeletonSequence]) -> None:
    for i, s in enumerate(seqs):
        if not 0 <= s.label < manifest.num_classes:
            raise LabelRangeError(f"sample {i}: label {s.label} >= class count {manifest.num_classes}")
        if s.V != manifest.V:
            raise DatasetError(f"sample {i}: V={s.V} disagrees with manifest V={manifest.V}")


# ---------------------------------------------------------------------------
# Synthetic ambiguous actions
# ---------------------------------------------------------------------------

_REST = np.array(
    [
        [0.00, 1.00, 0.0],  # root (pelvis)
        [0.00, 1.45, 0.0],  # spine top
        [0.00, 1.70, 0.0],  # head
        [-0.20, 1.45, 0.0],
        [-0.20, 1.17, 0.0],
        [-0.20, 0.92, 0.0],
        [0.20, 1.45, 0.0],
        [0.20, 1.17, 0.0],
        [0.20, 0.92, 0.0],
        [-0.10, 1.00, 0.0],
        [0.10, 1.00, 0.0],
    ]
)
_UPPER_ARM = 0.28
_FOREARM = 0.25

@dataclass(frozen=True)
class PairSpec:
    """Two classes sharing ``base``; the second differs by ``delta`` in one joint.

    ``kind`` is ``"amplitude"`` (relative amplitude change) or ``"phase"``
    (offset as a fraction of the motion cycle).
    """

    base: str
    kind: str
    delta: float


@dataclass
class SynthConfig:
    pairs: tuple[PairSpec, ...] = (PairSpec("wave", "amplitude", 0.15), PairSpec("swing", "phase", 0.10))
    samples_per_class: int = 200
    frames: int = 40
    T_target: int = 32
    cycles: float = 2.0
    noise_sigma: float = 0.01
    time_warp: float = 0.05

    def class_names(self) -> list[str]:
        names = []
        for p in self.pairs:
            names.append(f"{p.base}/base")
            names.append(f"{p.base}/{p.kind}{p.delta:+g}")
        return names


def _arm(shoulder: np.ndarray, elevation: np.ndarray, flexion: np.ndarray, side: float, forward: np.ndarray):
    """Elbow and wrist positions for an arm hanging from ``shoulder``.

    ``elevation`` rotates the upper arm up from hanging (radians) in a plane
    tilted forward by ``forward``; ``flexion`` bends the elbow further.
    """

    def direction(angle):
        lateral = np.sin(angle) * np.cos(forward) * side
        vertical = -np.cos(angle)
        depth = np.sin(angle) * np.sin(forward)
        return np.stack([lateral, vertical, depth], axis=-1)

    elbow = shoulder + _UPPER_ARM * direction(elevation)
    wrist = elbow + _FOREARM * direction(elevation + flexion)
    return elbow, wrist


def _render(base: str, t: np.ndarray, amp_scale: float, phase_shift: float) -> np.ndarray:
    """Joint positions (T, V, 3) for one limb program at cycle times ``t``."""
    tau = 2 * np.pi
    pose = np.repeat(_REST[None], t.size, axis=0).copy()
    sway = 0.015 * np.sin(tau * t)
    pose[:, 1:3, 0] += sway[:, None]
    zeros = np.zeros_like(t)
    if base == "wave":
        # right hand raised beside the head, forearm swinging side to side
        el_r = np.full_like(t, 2.4)
        fl_r = 0.55 * amp_scale * np.sin(tau * t) + 0.3
        el_l = np.full_like(t, 0.15)
        fl_l = np.full_like(t, 0.2)
        fw_r, fw_l = np.full_like(t, 0.2), zeros
    elif base == "swing":
        # both arms swing forward and back, in phase
        el_r = 0.9 + 0.6 * np.sin(tau * t)
        el_l = 0.9 + 0.6 * amp_scale * np.sin(tau * (t + phase_shift))
        fl_r = 0.4 + 0.2 * np.sin(tau * t)
        fl_l = 0.4 + 0.2 * np.sin(tau * (t + phase_shift))
        fw_r = fw_l = np.full_like(t, 1.2)
    elif base == "reach":
        el_r = 1.3 + 0.5 * amp_scale * np.sin(tau * (t + phase_shift))
        fl_r = 0.6 - 0.5 * np.sin(tau * (t + phase_shift))
        el_l = np.full_like(t, 0.15)
        fl_l = np.full_like(t, 0.2)
        fw_r, fw_l = np.full_like(t, 1.0), zeros
    else:
        raise ValueError(f"unknown limb program {base!r}")
    if base == "wave" and phase_shift:
        fl_r = 0.55 * amp_scale * np.sin(tau * (t + phase_shift)) + 0.3
    pose[:, 7], pose[:, 8] = _arm(pose[:, 6], el_r, fl_r, +1.0, fw_r)
    pose[:, 4], pose[:, 5] = _arm(pose[:, 3], el_l, fl_l, -1.0, fw_l)
    return pose


def synth_generate(cfg: SynthConfig, seed: int) -> tuple[DatasetManifest, list[SkeletonSequence]]:
    """Balanced dataset of ambiguous class pairs, deterministic in ``seed``."""
    if 2 * len(cfg.pairs) < 2:
        raise ValueError("need at least 2 classes")
    for p in cfg.pairs:
        if p.delta == 0:
            raise DegenerateClassPairError(f"degenerate class pair: {p.base} with zero {p.kind} perturbation")
        if p.kind not in ("amplitude", "phase"):
            raise ValueError(f"unknown perturbation kind {p.kind!r}")
    rng = np.random.default_rng(seed)
    seqs: list[SkeletonSequence] = []
    label = 0
    for p in cfg.pairs:
        for variant in (False, True):
            amp = 1.0 + (p.delta if variant and p.kind == "amplitude" else 0.0)
            shift = p.delta if variant and p.kind == "phase" else 0.0
            for k in range(cfg.samples_per_class):
                start = rng.uniform(0.0, 1.0)
                warp = 1.0 + rng.uniform(-cfg.time_warp, cfg.time_warp)
                t = start + np.linspace(0.0, cfg.cycles * warp, cfg.frames, endpoint=False)
                pose = _render(p.base, t, amp, shift)
                pose = pose + rng.normal(0.0, cfg.noise_sigma, size=pose.shape)
                coords = pose.transpose(2, 0, 1).astype(np.float32)
                seqs.append(SkeletonSequence(coords, label, f"synth:{seed}:{label}:{k}"))
            label += 1
    order = rng.permutation(len(seqs))
    seqs = [seqs[i] for i in order]
    manifest = DatasetManifest(
        class_names=cfg.class_names(),
        V=len(STICK_JOINTS),
        T_target=cfg.T_target,
        edges=[tuple(e) for e in STICK_EDGES],
        count=len(seqs),
    )
    return manifest, seqs


def class_groups(class_names: Sequence[str]) -> dict[str, list[int]]:
    """Group classes by the prefix before '/' (ambiguous pairs share a prefix)."""
    groups: dict[str, list[int]] = {}
    for i, name in enumerate(class_names):
        groups.setdefault(name.split("/", 1)[0], []).append(i)
    return groups


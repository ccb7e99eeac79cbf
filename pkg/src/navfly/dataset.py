"""Trajectory records, collection and on-disk storage.

A dataset directory holds ``index.jsonl`` (a header line, then one JSON
trajectory record per line) and ``depth.bin``, a sidecar with one float32
depth stack per trajectory behind a checksummed offset table.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .eval import TERMINATIONS, Episode, EpisodeLimits, EpisodeOutcome
from .instructions import make_instruction
from .policy import Policy, load_policy
from .world import DepthImage, Scene, TargetInstance, UavState, Vec3, VelocityAction, sample_start

DATASET_VERSION = 1
INDEX_NAME = "index.jsonl"
DEPTH_NAME = "depth.bin"
DEPTH_MAGIC = b"NVDB"
SOURCES = ("sac_agent", "scripted_expert")

_BLOB_HEAD = struct.Struct("<4sHI")  # magic, version, entry count
_BLOB_ENTRY = struct.Struct("<QQI")  # offset, nbytes, crc32


class DatasetError(Exception):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


class CollectionError(RuntimeError):
    """The policy failed mid-episode; the partial trajectory is discarded."""


@dataclass(frozen=True)
class StepRecord:
    t: int
    state: UavState
    action: VelocityAction
    depth: DepthImage
    target_visible: bool


@dataclass(frozen=True)
class TrajectoryRecord:
    id: str
    scene_id: str
    instruction: str
    goal_target_id: int
    steps: tuple
    outcome: EpisodeOutcome
    source: str

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("trajectory needs at least one step")
        if any(b.t <= a.t for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("step indices must be strictly increasing")
        if self.outcome.termination not in TERMINATIONS:
            raise ValueError(f"bad termination {self.outcome.termination!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if not self.instruction.strip():
            raise ValueError("empty instruction")

    @property
    def visibility(self) -> list[bool]:
        return [s.target_visible for s in self.steps]


def collect_trajectory(scene: Scene, policy: Policy, goal: TargetInstance | None = None,
                       rng: np.random.Generator | None = None, limits: EpisodeLimits = EpisodeLimits(),
                       source: str = "scripted_expert", traj_id: str | None = None,
                       start: UavState | None = None) -> TrajectoryRecord:
    rng = rng if rng is not None else np.random.default_rng(0)
    goal = goal or scene.goal
    if start is None:
        start = sample_start(scene, rng)
    instruction = make_instruction(rng, goal, scene)
    ep = Episode(scene, goal, start, instruction, limits, record=True)
    if hasattr(policy, "reset"):
        policy.reset()
    while not ep.done:
        inp = ep.observe()
        try:
            action = policy.act(inp).action
        except Exception as exc:
            raise CollectionError(f"policy failed at step {ep.steps}: {exc}") from exc
        ep.apply(action)
    steps = [StepRecord(t, st, a, d, bool(v)) for t, (st, a, d, v) in enumerate(ep.trace)]
    return TrajectoryRecord(traj_id or f"{scene.id}-0", scene.id, instruction, goal.id, steps, ep.outcome(), source)


def _collect_one(args) -> TrajectoryRecord:
    scene, policy_spec, seed, i, limits = args
    policy = load_policy(policy_spec, scene=scene)
    source = "scripted_expert" if policy_spec == "expert" else "sac_agent"
    rng = np.random.default_rng((seed, i))
    return collect_trajectory(scene, policy, scene.goal, rng, limits, source, f"{scene.id}-{i:05d}")


def collect_many(scenes, policy_spec: str, episodes: int, seed: int, limits: EpisodeLimits = EpisodeLimits(),
                 jobs: int = 1) -> list[TrajectoryRecord]:
    """``episodes`` trajectories per scene; output order is fixed regardless of ``jobs``."""
    tasks = [(sc, policy_spec, seed, i, limits) for sc in scenes for i in range(episodes)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_collect_one, tasks, chunksize=8))
    return [_collect_one(t) for t in tasks]


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------


def _record_header(rec: TrajectoryRecord, depth_index: int) -> dict:
    d0 = rec.steps[0].depth
    return {
        "id": rec.id,
        "scene_id": rec.scene_id,
        "instruction": rec.instruction,
        "goal_target_id": rec.goal_target_id,
        "source": rec.source,
        "outcome": rec.outcome.to_dict(),
        "depth": {"index": depth_index, "width": d0.width, "height": d0.height, "hfov": d0.hfov,
                  "max_range": d0.max_range},
        "t": [s.t for s in rec.steps],
        "state": [[s.state.position.x, s.state.position.y, s.state.position.z, s.state.yaw, s.state.clock]
                  for s in rec.steps],
        "action": [list(s.action.as_tuple()) for s in rec.steps],
        "visible": [s.target_visible for s in rec.steps],
    }


def write_dataset(records, path) -> None:
    """Write ``records`` to directory ``path`` (created if needed)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = list(records)
    blobs = []
    lines = [json.dumps({"format": "navfly-dataset", "version": DATASET_VERSION, "count": len(records),
                         "depth_file": DEPTH_NAME}, sort_keys=True)]
    for i, rec in enumerate(records):
        cams = {(s.depth.width, s.depth.height, s.depth.hfov, s.depth.max_range) for s in rec.steps}
        if len(cams) != 1:
            raise ValueError(f"trajectory {rec.id} mixes depth camera settings")
        stack = np.stack([s.depth.ranges for s in rec.steps]).astype("<f4")
        blobs.append(stack.tobytes())
        lines.append(json.dumps(_record_header(rec, i), sort_keys=True, separators=(",", ":")))
    table_len = _BLOB_HEAD.size + _BLOB_ENTRY.size * len(blobs) + 4
    head = _BLOB_HEAD.pack(DEPTH_MAGIC, DATASET_VERSION, len(blobs))
    off = table_len
    for b in blobs:
        head += _BLOB_ENTRY.pack(off, len(b), zlib.crc32(b))
        off += len(b)
    head += struct.pack("<I", zlib.crc32(head))
    (path / DEPTH_NAME).write_bytes(head + b"".join(blobs))
    (path / INDEX_NAME).write_text("\n".join(lines) + "\n")


def _read_blobs(data: bytes) -> list[bytes]:
    if len(data) < _BLOB_HEAD.size:
        raise DatasetTruncatedError("depth sidecar shorter than its header")
    magic, version, n = _BLOB_HEAD.unpack_from(data, 0)
    if magic != DEPTH_MAGIC:
        raise DatasetChecksumError("depth sidecar has a bad magic")
    if version != DATASET_VERSION:
        raise DatasetVersionError(f"depth sidecar version {version}, expected {DATASET_VERSION}")
    table_end = _BLOB_HEAD.size + _BLOB_ENTRY.size * n
    if len(data) < table_end + 4:
        raise DatasetTruncatedError("depth sidecar offset table is truncated")
    (crc,) = struct.unpack_from("<I", data, table_end)
    if zlib.crc32(data[:table_end]) != crc:
        raise DatasetChecksumError("depth sidecar offset table checksum mismatch")
    out = []
    for k in range(n):
        off, nbytes, c = _BLOB_ENTRY.unpack_from(data, _BLOB_HEAD.size + k * _BLOB_ENTRY.size)
        if off + nbytes > len(data):
            raise DatasetTruncatedError(f"depth entry {k} runs past the end of the sidecar")
        b = data[off:off + nbytes]
        if zlib.crc32(b) != c:
            raise DatasetChecksumError(f"depth entry {k} checksum mismatch")
        out.append(b)
    return out


def _parse_record(h: dict, blobs: list[bytes]) -> TrajectoryRecord:
    d = h["depth"]
    k = d["index"]
    if not 0 <= k < len(blobs):
        raise DatasetTruncatedError(f"record {h['id']} points at missing depth entry {k}")
    T = len(h["t"])
    w, hh = d["width"], d["height"]
    raw = blobs[k]
    if len(raw) != 4 * T * w * hh:
        raise DatasetTruncatedError(f"depth entry {k} has {len(raw)} bytes, expected {4 * T * w * hh}")
    stack = np.frombuffer(raw, dtype="<f4").reshape(T, hh, w)
    steps = []
    for i in range(T):
        x, y, z, yaw, clock = h["state"][i]
        steps.append(StepRecord(
            h["t"][i],
            UavState(Vec3(x, y, z), yaw, clock),
            VelocityAction(*h["action"][i]),
            DepthImage(w, hh, stack[i].astype(np.float32), d["hfov"], d["max_range"]),
            bool(h["visible"][i]),
        ))
    return TrajectoryRecord(h["id"], h["scene_id"], h["instruction"], h["goal_target_id"], steps,
                            EpisodeOutcome.from_dict(h["outcome"]), h["source"])


def read_dataset(path) -> list[TrajectoryRecord]:
    path = Path(path)
    try:
        text = (path / INDEX_NAME).read_text()
    except FileNotFoundError as exc:
        raise DatasetError(f"no dataset index at {path}") from exc
    lines = text.split("\n")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetTruncatedError("dataset header line is unreadable") from exc
    if header.get("format") != "navfly-dataset":
        raise DatasetError("not a navfly dataset index")
    if header.get("version") != DATASET_VERSION:
        raise DatasetVersionError(f"dataset version {header.get('version')}, expected {DATASET_VERSION}")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != header["count"] or not text.endswith("\n"):
        raise DatasetTruncatedError(f"index holds {len(body)} records, header says {header['count']}")
    blobs = _read_blobs((path / header["depth_file"]).read_bytes())
    records = []
    for ln in body:
        try:
            h = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise DatasetTruncatedError("unreadable index record") from exc
        records.append(_parse_record(h, blobs))
    return records


def merge_shards(shards) -> list[TrajectoryRecord]:
    """Concatenate per-worker shards in a fixed order (sorted by first record id)."""
    shards = [list(s) for s in shards if s]
    shards.sort(key=lambda s: s[0].id)
    return [r for s in shards for r in s]


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def dataset_stats(records) -> dict:
    """Counts, means and phase fractions; a pure function of the records."""
    from .rebalance import PhaseLabel, segment

    records = list(records)
    n_steps = sum(len(r.steps) for r in records)
    phase_steps = {p.name.lower(): 0 for p in PhaseLabel}
    for r in records:
        for (a, b), lab in segment(r).segments:
            phase_steps[lab.name.lower()] += b - a
    term = {k: sum(r.outcome.termination == k for r in records) for k in TERMINATIONS}
    words = set()
    for r in records:
        words.update(r.instruction.split())

    def mean(xs):
        xs = list(xs)
        return math.fsum(xs) / len(xs) if xs else None

    return {
        "schema": 1,
        "n_trajectories": len(records),
        "n_steps": n_steps,
        "mean_steps": mean(len(r.steps) for r in records),
        "mean_path_length_m": mean(r.outcome.path_length for r in records),
        "mean_instruction_words": mean(len(r.instruction.split()) for r in records),
        "vocabulary_size": len(words),
        "terminations": term,
        "sources": {s: sum(r.source == s for r in records) for s in SOURCES},
        "phase_steps": phase_steps,
        "phase_fractions": {k: (v / n_steps if n_steps else None) for k, v in phase_steps.items()},
    }

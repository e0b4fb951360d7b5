"""Episode logs: one binary file per rollout plus a JSON manifest per dataset.

File layout, all integers and floats little-endian::

    b"LGEPLOG\\x00"                 8-byte magic
    u32 format version
    u32 header length, header JSON (task id, seed, sim config hash, ...)
    u32 step count
    per step: u32 height, u32 width, f32 depth[height*width],
              f32 action[4], f32 reward, u8 success

Step ``t`` holds the observation produced by the action stored in the same
record, so record 0 carries the reset observation with a zero action and the
reward of the reset state.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes

MAGIC = b"LGEPLOG\x00"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class LogError(ValueError):
    pass


@dataclass
class Episode:
    """A recorded rollout.

    ``frames[t]`` is the depth image after ``actions[t]``; ``actions[0]`` is a
    placeholder (zeros) for the reset frame.
    """

    task_id: str
    seed: int
    config_hash: str
    frames: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    successes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def n_actions(self) -> int:
        return max(0, len(self.frames) - 1)

    def append(self, frame, action, reward: float, success: bool) -> None:
        self.frames.append(np.asarray(frame, dtype=np.float32))
        self.actions.append(np.asarray(action, dtype=np.float32).reshape(4))
        self.rewards.append(float(np.float32(reward)))
        self.successes.append(bool(success))

    def header(self) -> dict:
        return {"task_id": self.task_id, "seed": int(self.seed), "config_hash": self.config_hash, **self.extra}

    def equals(self, other: "Episode") -> bool:
        return (self.header() == other.header() and len(self) == len(other)
                and all(np.array_equal(a, b) for a, b in zip(self.frames, other.frames))
                and all(np.array_equal(a, b) for a, b in zip(self.actions, other.actions))
                and self.rewards == other.rewards and self.successes == other.successes)


def dumps(ep: Episode) -> bytes:
    buf = io.BytesIO()
    header = json.dumps(ep.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(ep)))
    for frame, action, r, ok in zip(ep.frames, ep.actions, ep.rewards, ep.successes):
        h, w = frame.shape
        buf.write(struct.pack("<II", h, w))
        buf.write(np.ascontiguousarray(frame, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(action, dtype="<f4").tobytes())
        buf.write(struct.pack("<fB", r, int(ok)))
    return buf.getvalue()


def loads(blob: bytes) -> Episode:
    if blob[:len(MAGIC)] != MAGIC:
        raise LogError("not an episode log (bad magic)")
    try:
        pos = len(MAGIC)
        version, hlen = struct.unpack_from("<II", blob, pos)
        if version != FORMAT_VERSION:
            raise LogError(f"unsupported episode log version {version}")
        pos += 8
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        extra = {k: v for k, v in header.items() if k not in ("task_id", "seed", "config_hash")}
        ep = Episode(header["task_id"], header["seed"], header["config_hash"], extra=extra)
        for _ in range(n):
            h, w = struct.unpack_from("<II", blob, pos)
            pos += 8
            size = 4 * h * w
            if pos + size + 21 > len(blob):
                raise LogError("truncated episode log")
            frame = np.frombuffer(blob, dtype="<f4", count=h * w, offset=pos).reshape(h, w).astype(np.float32)
            pos += size
            action = np.frombuffer(blob, dtype="<f4", count=4, offset=pos).astype(np.float32)
            pos += 16
            r, ok = struct.unpack_from("<fB", blob, pos)
            pos += 5
            ep.frames.append(frame)
            ep.actions.append(action)
            ep.rewards.append(float(r))
            ep.successes.append(bool(ok))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise LogError(f"corrupt episode log: {exc}") from exc
    if pos != len(blob):
        raise LogError("trailing bytes after last record")
    return ep


def save(path, ep: Episode) -> None:
    atomic_write_bytes(path, dumps(ep))


def load(path) -> Episode:
    try:
        return loads(Path(path).read_bytes())
    except FileNotFoundError:
        raise LogError(f"episode log not found: {path}") from None


def episode_filename(task_id: str, seed: int) -> str:
    return f"{task_id}_{seed:06d}.eplog"


def write_dataset(out_dir, episodes: list[Episode], manifest_extra: dict | None = None) -> dict:
    """Write every episode plus ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    files = []
    for ep in episodes:
        name = episode_filename(ep.task_id, ep.seed)
        save(out_dir / name, ep)
        files.append({"file": name, "seed": int(ep.seed), "steps": ep.n_actions})
    manifest = {
        "format_version": FORMAT_VERSION,
        "episodes": len(episodes),
        "entries": files,
        **(manifest_extra or {}),
    }
    atomic_write_bytes(out_dir / MANIFEST_NAME,
                       (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise LogError(f"dataset manifest not found: {path}") from None


def read_dataset(data_dir) -> tuple[list[Episode], dict]:
    manifest = read_manifest(data_dir)
    eps = [load(Path(data_dir) / e["file"]) for e in manifest["entries"]]
    return eps, manifest

"""Weight-snapshot averaging (SWA) and the staged learning-rate schedule.

Snapshots are ordered name -> float64 array maps with two on-disk forms:
a JSON manifest plus little-endian raw binary payload, and a pure-JSON
variant with inline values for small fixtures. Both round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np


class IncompatibleSnapshotsError(Exception):
    """Snapshots disagree on entry names or shapes."""


@dataclass
class ParamSnapshot:
    entries: dict[str, np.ndarray]
    notes: str = ""

    def __post_init__(self):
        self.entries = {name: np.asarray(a, dtype=np.float64)
                        for name, a in self.entries.items()}


@dataclass
class LRConfig:
    base_lr: float = 0.02
    warmup_lr: float = 0.0067
    warmup_iters: int = 500
    decay_epochs: tuple[int, ...] = (8, 11)
    decay_factor: float = 0.1
    max_epoch: int = 12

    def __post_init__(self):
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError("decay_epochs must be ascending")


def _exact_mean(stack: np.ndarray) -> np.ndarray:
    """Correctly rounded elementwise mean over axis 0.

    Exact rational arithmetic makes the result independent of input order
    and bit-identical to the input when all rows agree.
    """
    k, flat = stack.shape[0], stack.reshape(stack.shape[0], -1)
    out = np.empty(flat.shape[1], dtype=np.float64)
    for i in range(flat.shape[1]):
        col = flat[:, i]
        if np.all(col == col[0]):
            out[i] = col[0]
            continue
        total = sum(Fraction(v) for v in col.tolist())
        out[i] = float(total / k)
    return out.reshape(stack.shape[1:])


def swa_average(snapshots: list[ParamSnapshot]) -> ParamSnapshot:
    """Elementwise mean of compatible snapshots, order invariant to 0 ulp."""
    if not snapshots:
        raise ValueError("need at least one snapshot")
    ref = snapshots[0]
    for s in snapshots[1:]:
        if list(s.entries) != list(ref.entries):
            extra = set(s.entries) ^ set(ref.entries)
            name = sorted(extra)[0] if extra else next(
                n for n, m in zip(ref.entries, s.entries) if n != m)
            raise IncompatibleSnapshotsError(f"entry name mismatch at '{name}'")
        for name in ref.entries:
            if s.entries[name].shape != ref.entries[name].shape:
                raise IncompatibleSnapshotsError(
                    f"shape mismatch at '{name}': "
                    f"{s.entries[name].shape} vs {ref.entries[name].shape}")
    out = {}
    for name in ref.entries:
        stack = np.stack([s.entries[name] for s in snapshots], axis=0)
        out[name] = _exact_mean(stack)
    notes = (f"SWA mean of {len(snapshots)} snapshots; BatchNorm statistics "
             "not recalibrated (no training loop in this toolkit)")
    return ParamSnapshot(entries=out, notes=notes)


def lr_at(iteration: int, iters_per_epoch: int, cfg: LRConfig) -> float:
    """Learning rate at a global iteration.

    Constant warmup_lr until warmup_iters, then base_lr decayed by
    decay_factor at each configured epoch boundary.
    """
    if iters_per_epoch <= 0:
        raise ValueError("iters_per_epoch must be positive")
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration < cfg.warmup_iters:
        return cfg.warmup_lr
    epoch = iteration // iters_per_epoch
    lr = cfg.base_lr
    for d in cfg.decay_epochs:
        if epoch >= d:
            lr *= cfg.decay_factor
    return lr


def save_snapshot_json(snap: ParamSnapshot, path: str | Path) -> None:
    """Pure-JSON snapshot with inline values (small fixtures only)."""
    doc = {"notes": snap.notes,
           "entries": [{"name": name, "shape": list(a.shape), "dtype": "f64",
                        "values": a.reshape(-1).tolist()}
                       for name, a in snap.entries.items()]}
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def save_snapshot_binary(snap: ParamSnapshot, manifest_path: str | Path,
                         payload_path: str | Path | None = None) -> None:
    """Manifest JSON plus raw little-endian float64 payload."""
    manifest_path = Path(manifest_path)
    payload_path = Path(payload_path) if payload_path \
        else manifest_path.with_suffix(".bin")
    entries, chunks, offset = [], [], 0
    for name, a in snap.entries.items():
        flat = np.ascontiguousarray(a.reshape(-1), dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "dtype": "f64",
                        "offset": offset, "length": flat.size})
        chunks.append(flat.tobytes())
        offset += flat.size
    doc = {"notes": snap.notes, "payload": payload_path.name, "entries": entries}
    payload_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_snapshot(path: str | Path) -> ParamSnapshot:
    """Load either snapshot format, detected by the presence of a payload key."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    entries: dict[str, np.ndarray] = {}
    if "payload" in doc:
        payload = np.frombuffer((path.parent / doc["payload"]).read_bytes(),
                                dtype="<f8")
        for e in doc["entries"]:
            flat = payload[e["offset"]:e["offset"] + e["length"]]
            entries[e["name"]] = flat.astype(np.float64).reshape(e["shape"])
    else:
        for e in doc["entries"]:
            entries[e["name"]] = np.array(e["values"],
                                          dtype=np.float64).reshape(e["shape"])
    for e in doc["entries"]:
        if int(np.prod(e["shape"])) != len(entries[e["name"]].reshape(-1)):
            raise ValueError(f"entry '{e['name']}': shape/length mismatch")
    return ParamSnapshot(entries=entries, notes=doc.get("notes", ""))

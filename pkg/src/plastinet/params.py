"""Named parameter tensors with per-parameter trainability and checkpoint I/O.

The checkpoint file is a ``.npz`` container holding one raw float64 array per
parameter plus a JSON manifest (parameter order and the trainable set), so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

__all__ = ["ParamStore", "save_checkpoint", "load_checkpoint"]


class ParamStore:
    """Map of parameter id to float64 array plus the set of trainable ids."""

    def __init__(self):
        self.entries: dict[str, np.ndarray] = {}
        self.trainable: set[str] = set()

    def add(self, pid: str, value, trainable: bool = True) -> np.ndarray:
        if pid in self.entries:
            raise ValueError(f"duplicate parameter id {pid!r}")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self.entries[pid] = arr
        if trainable:
            self.trainable.add(pid)
        return arr

    def remove(self, pid: str) -> None:
        if pid not in self.entries:
            raise KeyError(f"unknown parameter {pid!r}")
        del self.entries[pid]
        self.trainable.discard(pid)

    def replace(self, pid: str, value: np.ndarray) -> None:
        """Swap the array behind an existing id (used when pruning clips a
        brick that spanned columns of a neighbouring pruned layer)."""
        if pid not in self.entries:
            raise KeyError(f"unknown parameter {pid!r}")
        self.entries[pid] = np.ascontiguousarray(value, dtype=np.float64)

    def get(self, pid: str) -> np.ndarray:
        try:
            return self.entries[pid]
        except KeyError:
            raise KeyError(f"unknown parameter {pid!r}") from None

    def set_trainable(self, pids) -> None:
        pids = set(pids)
        unknown = pids - self.entries.keys()
        if unknown:
            raise KeyError(f"trainable set references unknown parameters: {sorted(unknown)}")
        self.trainable = pids

    def element_count(self, trainable_only: bool = False) -> int:
        ids = sorted(self.trainable) if trainable_only else sorted(self.entries)
        return sum(self.entries[p].size for p in ids)

    def snapshot(self) -> dict:
        """Deep copy of all values and the trainable set; restores bit-exactly."""
        return {
            "values": {pid: arr.copy() for pid, arr in self.entries.items()},
            "trainable": set(self.trainable),
        }

    def restore(self, snap: dict) -> None:
        self.entries = {pid: arr.copy() for pid, arr in snap["values"].items()}
        self.trainable = set(snap["trainable"])

    def copy(self) -> "ParamStore":
        other = ParamStore()
        other.restore(self.snapshot())
        return other

    def __contains__(self, pid: str) -> bool:
        return pid in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __repr__(self) -> str:
        return (f"ParamStore({len(self.entries)} params, "
                f"{self.element_count()} elements, {len(self.trainable)} trainable)")


def save_checkpoint(store: ParamStore, path: str) -> None:
    """Atomically write the store (values + trainable set) to ``path``."""
    names = sorted(store.entries)
    manifest = json.dumps({"names": names, "trainable": sorted(store.trainable)})
    payload = {f"arr_{i}": store.entries[name] for i, name in enumerate(names)}
    payload["manifest"] = np.frombuffer(manifest.encode("utf-8"), dtype=np.uint8)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> ParamStore:
    with np.load(path) as z:
        manifest = json.loads(bytes(z["manifest"]).decode("utf-8"))
        store = ParamStore()
        for i, name in enumerate(manifest["names"]):
            store.add(name, z[f"arr_{i}"], trainable=False)
        store.set_trainable(manifest["trainable"])
    return store

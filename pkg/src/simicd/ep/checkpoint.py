"""Versioned tissue-state checkpoints (npz or JSON)."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .solver import TissueState

__all__ = ["Checkpoint", "config_hash", "CHECKPOINT_VERSION"]

CHECKPOINT_VERSION = 1


def config_hash(simulator):
    """Digest of everything that determines a trajectory besides the state."""
    h = hashlib.sha256(simulator.grid.digest().encode())
    h.update(json.dumps(simulator.ionic.to_dict(), sort_keys=True).encode())
    h.update(repr(simulator.dt_ms).encode())
    return h.hexdigest()[:16]


@dataclass
class Checkpoint:
    state: TissueState
    config_hash: str
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def capture(cls, state, simulator, **meta):
        return cls(state.copy(), config_hash(simulator), dict(meta))

    def restore(self, simulator=None):
        """Fresh copy of the saved state, checked against ``simulator``'s config."""
        if simulator is not None and config_hash(simulator) != self.config_hash:
            raise ValueError("checkpoint was taken with a different grid/model configuration")
        return self.state.copy()

    @property
    def t_ms(self):
        return self.state.t_ms

    def save(self, path):
        path = Path(path)
        s = self.state
        if path.suffix == ".json":
            doc = {
                "version": self.version,
                "t_ms": s.t_ms,
                "step": s.step,
                "dt_ms": s.dt_ms,
                "ny": s.vm.shape[0],
                "nx": s.vm.shape[1],
                "vm": s.vm.ravel().tolist(),
                "h": s.h.ravel().tolist(),
                "act_ms": [None if np.isnan(a) else a for a in s.act_ms.ravel().tolist()],
                "config_hash": self.config_hash,
                "meta": self.meta,
            }
            path.write_text(json.dumps(doc))
        else:
            np.savez_compressed(
                path, version=self.version, step=s.step, dt_ms=s.dt_ms, vm=s.vm, h=s.h, act_ms=s.act_ms,
                config_hash=self.config_hash, meta=json.dumps(self.meta))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.suffix == ".json":
            doc = json.loads(path.read_text())
            if doc["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {doc['version']}")
            shape = (doc["ny"], doc["nx"])
            act = np.array([np.nan if a is None else a for a in doc["act_ms"]], dtype=float)
            state = TissueState(int(doc["step"]), float(doc["dt_ms"]),
                                np.array(doc["vm"], dtype=float).reshape(shape),
                                np.array(doc["h"], dtype=float).reshape(shape), act.reshape(shape))
            return cls(state, doc["config_hash"], doc.get("meta", {}), doc["version"])
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {int(z['version'])}")
            state = TissueState(int(z["step"]), float(z["dt_ms"]), z["vm"].copy(), z["h"].copy(), z["act_ms"].copy())
            return cls(state, str(z["config_hash"]), json.loads(str(z["meta"])), int(z["version"]))

"""Named landmarks, given either as positions or as vertex references.

File format, one landmark per line::

    # comment
    nose_tip 0.0 12.5 40.1
    chin #1234
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .mesh import Mesh

Entry = Union[np.ndarray, int]


class LandmarkError(ValueError):
    pass


@dataclass
class LandmarkSet:
    entries: Dict[str, Entry] = field(default_factory=dict)
    mesh: Optional[Mesh] = None

    def __post_init__(self):
        fixed = {}
        for name, val in self.entries.items():
            if isinstance(val, (int, np.integer)):
                val = int(val)
                if self.mesh is not None and not 0 <= val < self.mesh.n_vertices:
                    raise LandmarkError(f"landmark {name!r} references vertex {val} outside the mesh")
            else:
                val = np.asarray(val, dtype=np.float64).reshape(3)
            fixed[name] = val
        self.entries = fixed

    @classmethod
    def from_vertices(cls, mesh: Mesh, indices, names=None) -> "LandmarkSet":
        names = names or [f"lm{k}" for k in range(len(indices))]
        if len(set(names)) != len(names):
            raise LandmarkError("landmark names must be unique")
        return cls(dict(zip(names, (int(i) for i in indices))), mesh)

    @property
    def names(self) -> List[str]:
        return list(self.entries)

    def vertex_index(self, name: str) -> Optional[int]:
        val = self.entries[name]
        return val if isinstance(val, int) else None

    def position(self, name: str) -> np.ndarray:
        val = self.entries[name]
        if isinstance(val, int):
            if self.mesh is None:
                raise LandmarkError(f"landmark {name!r} is a vertex reference but no mesh is attached")
            return self.mesh.vertices[val].copy()
        return val

    def positions(self, names=None) -> np.ndarray:
        names = self.names if names is None else names
        return np.array([self.position(n) for n in names]).reshape(-1, 3)

    def attach(self, mesh: Mesh) -> "LandmarkSet":
        return LandmarkSet(dict(self.entries), mesh)


def common_names(a: LandmarkSet, b: LandmarkSet) -> List[str]:
    """Names present in both sets, in the order of ``a``."""
    return [n for n in a.names if n in b.entries]


def read_landmarks(path, mesh: Optional[Mesh] = None) -> LandmarkSet:
    entries: Dict[str, Entry] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            name = parts[0]
            if name in entries:
                raise LandmarkError(f"duplicate landmark name {name!r} on line {lineno}")
            try:
                if len(parts) == 2 and parts[1].startswith("#"):
                    entries[name] = int(parts[1][1:])
                elif len(parts) == 4:
                    entries[name] = np.array([float(p) for p in parts[1:]])
                else:
                    raise ValueError
            except ValueError as exc:
                raise LandmarkError(f"malformed landmark on line {lineno}: {line!r}") from exc
    return LandmarkSet(entries, mesh)


def write_landmarks(landmarks: LandmarkSet, path):
    with open(path, "w") as fh:
        for name, val in landmarks.entries.items():
            if isinstance(val, int):
                fh.write(f"{name} #{val}\n")
            else:
                x, y, z = (float(c) for c in val)
                fh.write(f"{name} {x!r} {y!r} {z!r}\n")


def landmark_pairs(source: LandmarkSet, target: LandmarkSet) -> Tuple[List[str], np.ndarray, np.ndarray]:
    names = common_names(source, target)
    return names, source.positions(names), target.positions(names)

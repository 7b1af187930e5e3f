"""Linear observation operators and measurement noise."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

NOISE_KINDS = ("none", "additive", "multiplicative")


@dataclass(frozen=True)
class ObservationOperator:
    """Sparse linear map from field space (``n_field``) to sensors (``n_obs``).

    Each row is a tuple of ``(field_index, weight)`` pairs.
    """

    n_field: int
    rows: tuple[tuple[tuple[int, float], ...], ...]

    def __post_init__(self):
        if not self.rows:
            raise ValueError("an observation operator needs at least one sensor")
        for j, row in enumerate(self.rows):
            if not row:
                raise ValueError(f"sensor {j} has an empty stencil")
            idx = [i for i, _ in row]
            if len(set(idx)) != len(idx):
                raise ValueError(f"sensor {j} repeats a field index")
            for i in idx:
                if not 0 <= i < self.n_field:
                    raise ValueError(f"sensor {j}: field index {i} out of range [0, {self.n_field})")

    @property
    def n_obs(self) -> int:
        return len(self.rows)

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        data, cols, indptr = [], [], [0]
        for row in self.rows:
            for i, w in row:
                cols.append(i)
                data.append(w)
            indptr.append(len(cols))
        return sparse.csr_matrix((data, cols, indptr), shape=(self.n_obs, self.n_field))

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def to_json(self) -> str:
        doc = {
            "n_obs": self.n_obs,
            "n_field": self.n_field,
            "rows": [[[int(i), float(w)] for i, w in row] for row in self.rows],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ObservationOperator":
        doc = json.loads(text)
        op = cls(int(doc["n_field"]), tuple(tuple((int(i), float(w)) for i, w in row) for row in doc["rows"]))
        if "n_obs" in doc and int(doc["n_obs"]) != op.n_obs:
            raise ValueError(f"n_obs={doc['n_obs']} disagrees with {op.n_obs} rows")
        return op


def point_restriction(indices: Sequence[int], n_field: int) -> ObservationOperator:
    """Point sensors reading the field at ``indices``."""
    indices = [int(i) for i in indices]
    if not indices:
        raise ValueError("zero sensors")
    if len(set(indices)) != len(indices):
        raise ValueError("duplicate sensor index")
    return ObservationOperator(n_field, tuple(((i, 1.0),) for i in indices))


def stencil_operator(stencils: Iterable[Iterable[tuple[int, float]]], n_field: int) -> ObservationOperator:
    """Sensors applying arbitrary weighted stencils."""
    rows = tuple(tuple((int(i), float(w)) for i, w in st) for st in stencils)
    return ObservationOperator(n_field, rows)


def one_sided_derivative(wall: int, inner: int, h: float) -> tuple[tuple[int, float], tuple[int, float]]:
    """First-order wall-normal difference ``(y[inner] - y[wall]) / h``."""
    if h <= 0:
        raise ValueError("spacing must be positive")
    return ((inner, 1.0 / h), (wall, -1.0 / h))


def observe(C: ObservationOperator, Y) -> np.ndarray:
    """Apply ``C`` to a field vector or to every column of a snapshot matrix."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape[0] != C.n_field:
        raise ValueError(f"field has {Y.shape[0]} entries, operator expects {C.n_field}")
    return np.asarray(C.matrix @ Y)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError("noise sigma must be finite and non-negative")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def column_normals(seed: int, column: int, n: int) -> np.ndarray:
    """Standard normals for one column from a Philox stream keyed on (seed, column).

    Row ``i`` of the column always receives the ``i``-th variate of that
    stream, so the result does not depend on how columns are scheduled.
    """
    bitgen = np.random.Philox(key=np.array([int(seed), int(column)], dtype=np.uint64))
    return np.random.Generator(bitgen).standard_normal(n)


def apply_noise(S, spec: NoiseSpec) -> np.ndarray:
    """Return a noisy copy of the measurement matrix (or vector) ``S``."""
    S = np.asarray(S, dtype=np.float64)
    if spec.kind == "none" or spec.sigma == 0.0:
        return S.copy()
    vector = S.ndim == 1
    M = S[:, None] if vector else S
    G = np.empty_like(M)
    for c in range(M.shape[1]):
        G[:, c] = column_normals(spec.seed, c, M.shape[0])
    if spec.kind == "additive":
        out = M + spec.sigma * G
    else:
        out = (1.0 + spec.sigma * G) * M
    return out[:, 0] if vector else out

"""Matrix storage, training sets, model bundles and centering helpers.

Matrices are plain ``float64`` numpy arrays. On disk they use the ODL1
binary layout::

    b"ODL1" | rows:u64le | cols:u64le | rows*cols float64le, column-major

Small hand-written inputs may also be given as headerless CSV files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"ODL1"
_HEADER = struct.Struct("<4sQQ")

__version__ = "0.1.0"

REQUIRED_META_KEYS = ("method", "n_o", "n_d", "n_s", "rank", "seed", "created_by_version")


class FormatError(ValueError):
    """Raised when a matrix file cannot be decoded."""


class NonFiniteError(ValueError):
    """Raised when refusing to store NaN or infinite entries."""


def as_matrix(a: Any) -> np.ndarray:
    """Return ``a`` as a 2-D float64 array (vectors become single columns)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got array with ndim={m.ndim}")
    return m


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_matrix(m: Any) -> bytes:
    m = as_matrix(m)
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix contains non-finite entries; refusing to write")
    rows, cols = m.shape
    body = np.asarray(m, dtype="<f8").tobytes(order="F")
    return _HEADER.pack(MAGIC, rows, cols) + body


def save_matrix(m: Any, path: str | os.PathLike) -> None:
    """Write ``m`` in ODL1 format (or CSV if ``path`` ends with ``.csv``).

    The file is written to a temporary sibling and renamed into place.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        m = as_matrix(m)
        if not np.all(np.isfinite(m)):
            raise NonFiniteError("matrix contains non-finite entries; refusing to write")
        lines = [",".join(repr(float(v)) for v in row) for row in m]
        _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))
        return
    _atomic_write(path, encode_matrix(m))


def decode_matrix(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes, need {_HEADER.size} (offset {len(buf)})")
    magic, rows, cols = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    need = _HEADER.size + 8 * rows * cols
    if len(buf) < need:
        raise FormatError(f"truncated payload: file ends at byte offset {len(buf)}, expected {need} bytes")
    if len(buf) > need:
        raise FormatError(f"trailing data after byte offset {need}")
    values = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=_HEADER.size)
    return values.reshape((rows, cols), order="F").astype(np.float64)


def _load_csv(path: Path) -> np.ndarray:
    rows: list[list[float]] = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            row = []
            for col, cell in enumerate(line.split(","), start=1):
                try:
                    row.append(float(cell))
                except ValueError:
                    raise FormatError(f"{path}: line {lineno}, column {col}: non-numeric cell {cell.strip()!r}") from None
            if rows and len(row) != len(rows[0]):
                raise FormatError(f"{path}: line {lineno}: expected {len(rows[0])} cells, got {len(row)}")
            rows.append(row)
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return np.array(rows, dtype=np.float64)


def load_matrix(path: str | os.PathLike) -> np.ndarray:
    """Read a matrix written by :func:`save_matrix`, or a headerless CSV."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path)
    return decode_matrix(path.read_bytes())


def center_columns(Y: Any) -> tuple[np.ndarray, np.ndarray]:
    """Subtract the snapshot mean (row-wise average) from every column."""
    Y = as_matrix(Y)
    if Y.shape[1] < 1:
        raise ValueError("need at least one snapshot")
    mean = Y.mean(axis=1)
    return Y - mean[:, None], mean


@dataclass(frozen=True)
class TrainingSet:
    """Paired snapshots ``Y`` (n_y x n_s) and measurements ``S`` (n_o x n_s)."""

    Y: np.ndarray
    S: np.ndarray
    mean_field: np.ndarray
    mean_obs: np.ndarray
    centered: bool = False

    def __post_init__(self):
        if self.Y.shape[1] != self.S.shape[1]:
            raise ValueError(f"Y has {self.Y.shape[1]} snapshots but S has {self.S.shape[1]}")

    @classmethod
    def from_raw(cls, Y, S) -> "TrainingSet":
        Yc, my = center_columns(Y)
        Sc, ms = center_columns(S)
        return cls(Yc, Sc, my, ms, centered=True)

    @property
    def n_s(self) -> int:
        return self.Y.shape[1]


@dataclass
class ModelBundle:
    """Learned estimator: predictor dictionary ``D`` and QoI dictionary ``Q @ RB``.

    Attributes
    ----------
    method : str
        One of ``pca``, ``ksvd``, ``gobal``.
    D : ndarray, shape (n_o, n_d)
        Measurement-space (predictor) dictionary.
    RB : ndarray, shape (rank, n_d)
        Reduced QoI dictionary.
    Q : ndarray, shape (n_y, rank)
        Orthonormal factor; the physical dictionary is ``Q @ RB``.
    mean_field, mean_obs : ndarray
        Centering offsets added back to estimates / removed from measurements.
    meta : dict
        Flat provenance record persisted as ``meta.json``.
    """

    method: str
    D: np.ndarray
    RB: np.ndarray
    Q: np.ndarray
    mean_field: np.ndarray
    mean_obs: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_o(self) -> int:
        return self.D.shape[0]

    @property
    def n_d(self) -> int:
        return self.D.shape[1]

    @property
    def n_y(self) -> int:
        return self.Q.shape[0]

    def check(self, tol_orth: float = 1e-8, tol_norm: float = 1e-10) -> list[str]:
        """Return a list of violated invariants (empty when the bundle is sound)."""
        problems = []
        if self.method not in ("pca", "ksvd", "gobal"):
            problems.append(f"unknown method {self.method!r}")
        if self.RB.shape[1] != self.n_d or self.Q.shape[1] != self.RB.shape[0]:
            problems.append("inconsistent D/RB/Q shapes")
        rank = self.Q.shape[1]
        if np.max(np.abs(self.Q.T @ self.Q - np.eye(rank)), initial=0.0) > tol_orth:
            problems.append("Q is not orthonormal")
        if self.method in ("gobal", "ksvd"):
            norms = np.linalg.norm(self.D, axis=0)
            if np.any(np.abs(norms - 1.0) > tol_norm):
                problems.append("D columns are not unit norm")
        return problems

    def save(self, directory: str | os.PathLike) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_matrix(self.D, directory / "D.odl")
        save_matrix(self.RB, directory / "RB.odl")
        save_matrix(self.Q, directory / "Q.odl")
        save_matrix(self.mean_field, directory / "mean.odl")
        save_matrix(self.mean_obs, directory / "mean_obs.odl")
        meta = {
            "method": self.method,
            "n_o": self.n_o,
            "n_d": self.n_d,
            "rank": self.Q.shape[1],
            "created_by_version": __version__,
        }
        meta.update(self.meta)
        meta.setdefault("n_s", 0)
        meta.setdefault("seed", 0)
        payload = json.dumps(meta, indent=2, sort_keys=True) + "\n"
        _atomic_write(directory / "meta.json", payload.encode("utf-8"))

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "ModelBundle":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        missing = [k for k in REQUIRED_META_KEYS if k not in meta]
        if missing:
            raise FormatError(f"{directory / 'meta.json'}: missing keys {missing}")
        mean_obs_path = directory / "mean_obs.odl"
        D = load_matrix(directory / "D.odl")
        mean_obs = load_matrix(mean_obs_path)[:, 0] if mean_obs_path.exists() else np.zeros(D.shape[0])
        return cls(
            method=meta["method"],
            D=D,
            RB=load_matrix(directory / "RB.odl"),
            Q=load_matrix(directory / "Q.odl"),
            mean_field=load_matrix(directory / "mean.odl")[:, 0],
            mean_obs=mean_obs,
            meta=meta,
        )

"""PCA whitening and its exact inverse.

Forward map for a row ``x``::

    x1 = W x                 # rotate onto principal components
    x2 = x1 / comp_std       # unit variance per component
    x3 = x2 - comp_mean      # zero mean

The inverse is ``W^T ((y + comp_mean) * comp_std)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import Reader, Writer, check_magic
from .errors import StorageError, ValidationError

EPS_STD = 1e-6
FILE_MAGIC = b"WHTN"
FILE_VERSION = 1


@dataclass
class Whitener:
    projection: np.ndarray
    comp_std: np.ndarray
    comp_mean: np.ndarray
    fitted_on: int = 0
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._cache: dict = {}

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    @property
    def is_rotation_free(self) -> bool:
        return bool(np.array_equal(self.projection, np.eye(self.dim)))

    def _params(self, dtype):
        key = np.dtype(dtype)
        if key not in self._cache:
            self._cache[key] = (
                np.ascontiguousarray(self.projection.T, dtype=key),
                self.comp_std.astype(key),
                self.comp_mean.astype(key),
                np.ascontiguousarray(self.projection, dtype=key),
            )
        return self._cache[key]

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1] != self.dim:
            raise ValidationError(f"expected {self.dim} columns, got {x.shape[-1]}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        dtype = np.float32 if x.dtype == np.float32 else np.float64
        wt, std, mean, _ = self._params(dtype)
        return (x.astype(dtype, copy=False) @ wt) / std - mean

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = self._check(y)
        dtype = np.float32 if y.dtype == np.float32 else np.float64
        _, std, mean, w = self._params(dtype)
        return ((y.astype(dtype, copy=False) + mean) * std) @ w

    def fold_direction(self, v: np.ndarray) -> np.ndarray:
        """Map a whitened-space direction into input space (no mean term)."""
        v = self._check(v)
        return (np.asarray(v, dtype=np.float64) * self.comp_std) @ self.projection


def identity(n: int) -> Whitener:
    return Whitener(np.eye(n), np.ones(n), np.zeros(n))


def _as_rows(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValidationError(f"need a nonempty 2-D matrix, got shape {rows.shape}")
    if not np.isfinite(rows).all():
        raise ValidationError("rows contain non-finite values")
    return rows


def _standardize(x1: np.ndarray, eps_std: float):
    std = x1.std(axis=0)
    clamped = int((std < eps_std).sum())
    std = np.maximum(std, eps_std)
    mean = (x1 / std).mean(axis=0)
    return std, mean, clamped


def fit(rows, eps_std: float = EPS_STD) -> Whitener:
    """Fit a PCA whitener on ``rows`` (n_fit x n)."""
    rows = _as_rows(rows)
    n_fit, n = rows.shape
    notes = []
    if n_fit < n:
        msg = f"fitting a {n}-dim whitener on only {n_fit} rows; small components get clamped"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    centered = rows - rows.mean(axis=0)
    cov = centered.T @ centered / n_fit
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    evecs = evecs[:, order]
    peak = np.abs(evecs).argmax(axis=0)
    signs = np.sign(evecs[peak, np.arange(n)])
    signs[signs == 0] = 1.0
    evecs = evecs * signs
    projection = evecs.T
    std, mean, clamped = _standardize(rows @ projection.T, eps_std)
    if clamped:
        notes.append(f"{clamped} component(s) clamped to std {eps_std}")
    return Whitener(projection, std, mean, fitted_on=n_fit, warnings=notes)


def fit_standardizer(rows, eps_std: float = EPS_STD) -> Whitener:
    """Mean/std standardization only (rotation fixed to the identity)."""
    rows = _as_rows(rows)
    std, mean, clamped = _standardize(rows, eps_std)
    notes = [f"{clamped} component(s) clamped to std {eps_std}"] if clamped else []
    return Whitener(np.eye(rows.shape[1]), std, mean, fitted_on=rows.shape[0], warnings=notes)


def fit_from_batches(batches, n_batches: int = 100, rotate: bool = True) -> Whitener:
    """Fit on the first ``n_batches`` items of a batch stream."""
    taken = []
    for i, b in enumerate(batches):
        if i >= n_batches:
            break
        taken.append(np.asarray(b, dtype=np.float64))
    if not taken:
        raise ValidationError("no batches available to fit the whitener")
    rows = np.concatenate(taken)
    return fit(rows) if rotate else fit_standardizer(rows)


@dataclass
class Spectrum:
    eigenvalues: np.ndarray
    top_fraction: dict[int, float]


def spectrum(rows, tops=(1, 8, 64)) -> Spectrum:
    rows = _as_rows(rows)
    centered = rows - rows.mean(axis=0)
    evals = np.linalg.eigvalsh(centered.T @ centered / rows.shape[0])[::-1]
    evals = np.clip(evals, 0.0, None)
    total = evals.sum()
    fractions = {}
    for j in tops:
        fractions[j] = float(evals[:j].sum() / total) if total > 0 else 0.0
    return Spectrum(evals, fractions)


# ---------------------------------------------------------------- serialization


def write_section(w: Writer, wh: Whitener) -> None:
    n = wh.dim
    w.pack("QQ", n, wh.fitted_on)
    w.array(wh.projection, "f8")
    w.array(wh.comp_std, "f8")
    w.array(wh.comp_mean, "f8")


def read_section(r: Reader) -> Whitener:
    n, fitted_on = r.unpack("QQ")
    proj = r.array("f8", (n, n))
    std = r.array("f8", (n,))
    mean = r.array("f8", (n,))
    return Whitener(proj, std, mean, fitted_on=fitted_on)


def to_bytes(wh: Whitener) -> bytes:
    w = Writer()
    w.raw(FILE_MAGIC)
    w.pack("B", FILE_VERSION)
    write_section(w, wh)
    return w.getvalue()


def save(wh: Whitener, path) -> None:
    try:
        Path(path).write_bytes(to_bytes(wh))
    except OSError as exc:
        raise StorageError(f"cannot write whitener {path}: {exc}") from exc


def load(path) -> Whitener:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read whitener {path}: {exc}") from exc
    r = Reader(raw, str(path))
    check_magic(r, FILE_MAGIC, FILE_VERSION)
    wh = read_section(r)
    r.done()
    return wh

"""Inference-Time Decomposition of Activations.

The dictionary is a set of unit-normalized training rows. Rows are encoded by
gradient pursuit against it, and training admits a row whenever the current
dictionary reconstructs it poorly.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from . import whitening as wmod
from ._binio import Reader, Writer, check_magic
from .actstore import sample_batches
from .codes import SparseCodes
from .errors import StorageError, ValidationError

log = logging.getLogger(__name__)

FILE_MAGIC = b"ITDA"
FILE_VERSION = 1
EXACT_ORACLE_LIMIT = 16


@dataclass
class ItdaModel:
    atoms: np.ndarray
    origin_ids: np.ndarray
    threshold: float
    k: int
    normalizer: wmod.Whitener

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def n(self) -> int:
        return self.atoms.shape[1]

    @property
    def d(self) -> int:
        return self.size

    def validate(self) -> None:
        if self.atoms.ndim != 2 or self.size == 0:
            raise ValidationError("ITDA dictionary must be a nonempty matrix")
        if self.origin_ids.shape != (self.size, 2):
            raise ValidationError("origin_ids must have one (shard, row) pair per atom")
        if self.normalizer.dim != self.n:
            raise ValidationError(f"normalizer dim {self.normalizer.dim} != dictionary dim {self.n}")


@dataclass
class PursuitResult:
    codes: SparseCodes
    recon: np.ndarray
    residual: np.ndarray
    residual_history: np.ndarray | None = None

    @property
    def residual_norm(self) -> np.ndarray:
        return np.linalg.norm(self.residual, axis=1)


def gradient_pursuit(atoms: np.ndarray, x, k: int, history: bool = False) -> PursuitResult:
    """Greedy gradient pursuit of ``x`` (vector or batch) over ``atoms`` rows.

    Codes may be signed. Ties in atom selection go to the lower index.
    """
    atoms = np.asarray(atoms, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if atoms.ndim != 2 or atoms.shape[0] == 0:
        raise ValidationError("pursuit needs a nonempty dictionary")
    if x.shape[1] != atoms.shape[1]:
        raise ValidationError(f"dictionary dim {atoms.shape[1]} != input dim {x.shape[1]}")
    if k < 1:
        raise ValidationError("k must be >= 1")
    idx, coefs, recon, hist = _kernels.pursuit(x, atoms, k, history)
    return PursuitResult(SparseCodes(idx, coefs, atoms.shape[0]), recon, x - recon, hist)


def ito_encode(m: ItdaModel, x, k: int | None = None, history: bool = False) -> PursuitResult:
    """Encode already-normalized rows against the model's dictionary."""
    return gradient_pursuit(m.atoms, x, m.k if k is None else k, history)


def reconstruct(m: ItdaModel, rows) -> np.ndarray:
    """Normalize, encode, and map the reconstruction back to input space."""
    xn = m.normalizer.forward(np.asarray(rows, dtype=np.float64))
    return m.normalizer.inverse(ito_encode(m, xn).recon)


def dense_codes(m: ItdaModel, rows, normalize: bool = True) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if normalize:
        rows = m.normalizer.forward(rows)
    return ito_encode(m, rows).codes.to_dense()


# ---------------------------------------------------------------- oracle


@dataclass
class OracleResult:
    indices: np.ndarray
    coefs: np.ndarray
    residual_norm: float
    exact: bool


def omp_oracle(atoms, x, k: int, exact_limit: int = EXACT_ORACLE_LIMIT) -> OracleResult:
    """Best size-k least-squares fit of ``x``.

    Exhaustive over supports when the dictionary has at most ``exact_limit``
    atoms, otherwise orthogonal matching pursuit (``exact=False``).
    """
    atoms = np.asarray(atoms, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n_atoms = atoms.shape[0]
    if not 1 <= k <= n_atoms:
        raise ValidationError(f"need 1 <= k <= {n_atoms}, got {k}")
    if n_atoms <= exact_limit:
        best = None
        for support in itertools.combinations(range(n_atoms), k):
            sub = atoms[list(support)].T
            coef, *_ = np.linalg.lstsq(sub, x, rcond=None)
            r = float(np.linalg.norm(x - sub @ coef))
            if best is None or r < best[2]:
                best = (np.array(support), coef, r)
        return OracleResult(best[0], best[1], best[2], True)
    support: list[int] = []
    resid = x.copy()
    coef = np.zeros(0)
    for _ in range(k):
        scores = np.abs(atoms @ resid)
        scores[support] = -np.inf
        support.append(int(np.argmax(scores)))
        sub = atoms[support].T
        coef, *_ = np.linalg.lstsq(sub, x, rcond=None)
        resid = x - sub @ coef
    return OracleResult(np.array(support), coef, float(np.linalg.norm(resid)), False)


# ---------------------------------------------------------------- training


@dataclass
class ItdaConfig:
    threshold: float = 0.1
    k: int = 8
    max_dict: int = 4096
    seed: int = 0
    batch_size: int = 1000
    normalizer_batches: int = 100
    error_mode: str = "fvu"

    def validate(self) -> None:
        if not self.threshold >= 0:
            raise ValidationError("threshold must be >= 0")
        if self.k < 1 or self.max_dict < 1:
            raise ValidationError("k and max_dict must be >= 1")
        if self.error_mode not in ("fvu", "mse"):
            raise ValidationError(f"unknown error_mode {self.error_mode!r}")


@dataclass
class GrowthLog:
    entries: list[tuple[int, int, float]] = field(default_factory=list)


def _row_error(x: np.ndarray, recon: np.ndarray, mode: str) -> float:
    r = x - recon
    rn = float(r @ r)
    if rn < _kernels.PURSUIT_TOL:
        return 0.0
    if mode == "mse":
        return rn / x.size
    # normalized data has zero mean, so the mean predictor is the zero vector
    return rn / max(float(x @ x), 1e-12)


def itda_train(shards, config: ItdaConfig, log_every: int = 1000) -> tuple[ItdaModel, GrowthLog]:
    """Single pass over the shards in sampler order, growing the dictionary."""
    config.validate()
    if config.threshold == 0 and config.error_mode == "fvu":
        log.info("threshold 0: every row not reconstructed exactly will be admitted")
    batches = list(sample_batches(shards, config.batch_size, seed=config.seed, epochs=1, return_ids=True))
    fit_rows = np.concatenate([b for b, _ in batches[:config.normalizer_batches]])
    normalizer = wmod.fit_standardizer(fit_rows)
    n = fit_rows.shape[1]
    atoms = np.zeros((config.max_dict, n))
    origins = np.zeros((config.max_dict, 2), dtype=np.int64)
    size = 0
    seen = 0
    err_sum = 0.0
    glog = GrowthLog()
    for rows, ids in batches:
        xs = normalizer.forward(rows.astype(np.float64))
        for x, oid in zip(xs, ids):
            seen += 1
            norm = float(np.linalg.norm(x))
            if size == 0:
                err = 1.0
                admit = norm > 0
            else:
                _, _, recon, _ = _kernels.pursuit(x[None, :], atoms[:size], config.k)
                err = _row_error(x, recon[0], config.error_mode)
                admit = err > config.threshold and norm > 0 and size < config.max_dict
            err_sum += err
            if admit:
                atoms[size] = x / norm
                origins[size] = oid
                size += 1
            if seen % log_every == 0:
                glog.entries.append((seen, size, err_sum / seen))
    if not glog.entries or glog.entries[-1][0] != seen:
        glog.entries.append((seen, size, err_sum / max(seen, 1)))
    # atoms are stored as float32 on disk; round now so files round-trip exactly
    model = ItdaModel(atoms[:size].astype(np.float32).astype(np.float64), origins[:size].copy(), config.threshold, config.k, normalizer)
    model.validate()
    return model, glog


# ---------------------------------------------------------------- persistence


def to_bytes(m: ItdaModel) -> bytes:
    m.validate()
    w = Writer()
    w.raw(FILE_MAGIC)
    w.pack("B", FILE_VERSION)
    w.pack("QQQd", m.n, m.size, m.k, m.threshold)
    w.array(m.atoms, "f4")
    w.array(m.origin_ids, "i8")
    wmod.write_section(w, m.normalizer)
    return w.getvalue()


def from_bytes(raw: bytes, name: str = "<bytes>") -> ItdaModel:
    r = Reader(raw, name)
    check_magic(r, FILE_MAGIC, FILE_VERSION)
    n, size, k, threshold = r.unpack("QQQd")
    atoms = r.array("f4", (size, n)).astype(np.float64)
    origins = r.array("i8", (size, 2))
    normalizer = wmod.read_section(r)
    r.done()
    return ItdaModel(atoms, origins, threshold, int(k), normalizer)


def save(m: ItdaModel, path) -> None:
    try:
        Path(path).write_bytes(to_bytes(m))
    except OSError as exc:
        raise StorageError(f"cannot write model {path}: {exc}") from exc


def load(path) -> ItdaModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read model {path}: {exc}") from exc
    return from_bytes(raw, str(path))

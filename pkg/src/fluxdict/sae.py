"""TopK sparse autoencoder with hand-derived gradients and an AuxK term.

Forward pass for a row ``x``::

    p = W_enc (x - b_post + b_pre)
    z = relu(topk(p))
    y = W_dec^T z + b_dec

The TopK selection is treated as fixed within a forward pass, so gradients
flow only through the selected, positive coordinates (plus the AuxK path).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from . import whitening as wmod
from ._binio import Reader, Writer, check_magic
from .actstore import random_unit_rows, sample_batches
from .codes import SparseCodes
from .errors import StorageError, TrainingDiverged, ValidationError

log = logging.getLogger(__name__)

PARAM_NAMES = ("enc_weight", "dec_weight", "b_pre", "b_post", "b_dec")
FILE_MAGIC = b"SAEM"
FILE_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


@dataclass
class SaeModel:
    enc_weight: np.ndarray
    dec_weight: np.ndarray
    b_pre: np.ndarray
    b_post: np.ndarray
    b_dec: np.ndarray
    k: int
    tokens_since_fired: np.ndarray | None = None
    whitener: wmod.Whitener | None = None

    def __post_init__(self):
        if self.tokens_since_fired is None:
            self.tokens_since_fired = np.zeros(self.d, dtype=np.int64)

    @property
    def d(self) -> int:
        return self.enc_weight.shape[0]

    @property
    def n(self) -> int:
        return self.enc_weight.shape[1]

    @property
    def dtype(self):
        return self.enc_weight.dtype

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "SaeModel":
        return SaeModel(
            **{name: arr.copy() for name, arr in self.params().items()},
            k=self.k, tokens_since_fired=self.tokens_since_fired.copy(), whitener=self.whitener,
        )

    def astype(self, dtype) -> "SaeModel":
        out = self.copy()
        for name in PARAM_NAMES:
            setattr(out, name, getattr(out, name).astype(dtype))
        return out

    def validate(self) -> None:
        d, n = self.enc_weight.shape
        if self.dec_weight.shape != (d, n):
            raise ValidationError(f"dec_weight shape {self.dec_weight.shape} != {(d, n)}")
        for name in ("b_pre", "b_post", "b_dec"):
            if getattr(self, name).shape != (n,):
                raise ValidationError(f"{name} must have shape ({n},)")
        if not 1 <= self.k <= d:
            raise ValidationError(f"need 1 <= k <= d, got k={self.k}, d={d}")
        if self.whitener is not None and self.whitener.dim != n:
            raise ValidationError(f"whitener dim {self.whitener.dim} != model input dim {n}")


def init_model(n: int, d: int, k: int, rng: np.random.Generator, first_batch=None,
               dtype=np.float32) -> SaeModel:
    """Random unit decoder rows, tied encoder init, b_dec at the batch median."""
    dec = random_unit_rows(d, n, rng)
    b_dec = np.zeros(n) if first_batch is None else np.median(np.asarray(first_batch, dtype=np.float64), axis=0)
    m = SaeModel(
        enc_weight=dec.astype(dtype), dec_weight=dec.astype(dtype).copy(),
        b_pre=np.zeros(n, dtype), b_post=np.zeros(n, dtype), b_dec=b_dec.astype(dtype), k=k,
    )
    m.validate()
    return m


def _check_input(m: SaeModel, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != m.n:
        raise ValidationError(f"model expects {m.n} input columns, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValidationError("input contains non-finite values")
    return x.astype(m.dtype, copy=False)


def pre_activations(m: SaeModel, x) -> np.ndarray:
    x = _check_input(m, x)
    return (x - m.b_post + m.b_pre) @ m.enc_weight.T


def encode(m: SaeModel, x) -> SparseCodes:
    """Top-k by value, then negatives clamped to zero."""
    p = pre_activations(m, x)
    idx, vals = _kernels.topk(p, m.k)
    return SparseCodes(idx, np.maximum(vals, 0), m.d)


def decode(m: SaeModel, codes: SparseCodes) -> np.ndarray:
    idx = codes.indices
    if idx.size and (idx.max() >= m.d or idx.min() < -1):
        raise ValidationError(f"code index out of range for d={m.d}")
    return _kernels.sparse_decode(idx, codes.values.astype(m.dtype), m.dec_weight, m.b_dec)


def decode_dense(m: SaeModel, dense: np.ndarray) -> np.ndarray:
    return dense.astype(m.dtype, copy=False) @ m.dec_weight + m.b_dec


def reconstruct(m: SaeModel, rows) -> np.ndarray:
    """Reconstruct rows given in the original (unwhitened) space."""
    rows = np.asarray(rows)
    xw = m.whitener.forward(rows) if m.whitener is not None else rows
    y = decode(m, encode(m, xw))
    return m.whitener.inverse(y) if m.whitener is not None else y


def dense_codes(m: SaeModel, rows, whiten: bool = True) -> np.ndarray:
    rows = np.asarray(rows)
    if whiten and m.whitener is not None:
        rows = m.whitener.forward(rows)
    return encode(m, rows).to_dense()


# ---------------------------------------------------------------- loss


@dataclass
class LossResult:
    loss: float
    mse: float
    aux_loss: float
    grads: dict[str, np.ndarray]
    active: np.ndarray
    aux_active: np.ndarray
    recon: np.ndarray


def _dense_topk(values: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense rectified top-k codes plus the mask of coordinates carrying gradient."""
    idx, vals = _kernels.topk(values, k)
    z = np.zeros_like(values)
    np.put_along_axis(z, idx, np.maximum(vals, 0), axis=1)
    return z, z > 0


def loss_and_grads(m: SaeModel, x, dead_mask=None, aux_k: int = 0, aux_coef: float = 0.0,
                   residual_target=None) -> LossResult:
    """Batch loss ``mse + aux_coef * aux`` and its analytic gradients.

    The AuxK target is the main residual ``x - y`` taken as a constant (no
    gradient flows through it). Passing ``residual_target`` overrides that
    constant, which lets a finite-difference check hold it fixed.
    """
    x = _check_input(m, x)
    batch, n = x.shape
    u = x - m.b_post + m.b_pre
    p = u @ m.enc_weight.T
    z, active = _dense_topk(p, m.k)
    y = z @ m.dec_weight + m.b_dec
    diff = y - x
    scale = 1.0 / (batch * n)
    mse = float(np.sum(diff * diff, dtype=np.float64) * scale)

    g_y = 2.0 * scale * diff
    g_dec = z.T @ g_y
    g_bdec = g_y.sum(axis=0)
    g_p = (g_y @ m.dec_weight.T) * active

    aux = 0.0
    aux_active = np.zeros_like(active)
    n_dead = 0 if dead_mask is None else int(np.count_nonzero(dead_mask))
    if aux_k > 0 and n_dead > 0 and aux_coef != 0.0:
        k_aux = min(aux_k, n_dead)
        masked = np.where(dead_mask[None, :], p, -np.inf)
        z_aux, aux_active = _dense_topk(masked, k_aux)
        target = -diff if residual_target is None else np.asarray(residual_target, dtype=m.dtype)
        aux_diff = z_aux @ m.dec_weight - target
        aux = float(np.sum(aux_diff * aux_diff, dtype=np.float64) * scale)
        g_aux = (2.0 * scale * aux_coef) * aux_diff
        g_dec += z_aux.T @ g_aux
        g_p += (g_aux @ m.dec_weight.T) * aux_active

    g_enc = g_p.T @ u
    g_u = (g_p @ m.enc_weight).sum(axis=0)
    grads = {
        "enc_weight": g_enc,
        "dec_weight": g_dec,
        "b_pre": g_u,
        "b_post": -g_u,
        "b_dec": g_bdec,
    }
    return LossResult(mse + aux_coef * aux, mse, aux, grads, active, aux_active, y)


# ---------------------------------------------------------------- optimizer


@dataclass
class SaeTrainConfig:
    d: int = 512
    k: int = 8
    steps: int = 30_000
    batch_size: int = 1000
    learning_rate: float = 4e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    aux_k: int = 64
    aux_coef: float = 1.0 / 32
    dead_threshold_tokens: int = 200_000
    seed: int = 0
    log_every: int = 100

    def validate(self) -> None:
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 1 <= self.k <= self.d:
            raise ValidationError(f"need 1 <= k <= d, got k={self.k}, d={self.d}")
        if not 0 <= self.aux_k <= self.d:
            raise ValidationError(f"aux_k={self.aux_k} must lie in [0, d={self.d}]")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam(model: SaeModel) -> AdamState:
    return AdamState(
        {k: np.zeros_like(a) for k, a in model.params().items()},
        {k: np.zeros_like(a) for k, a in model.params().items()},
    )


def _unit_rows(w: np.ndarray) -> None:
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    np.divide(w, np.where(norms > 0, norms, 1), out=w)


def adam_step(model: SaeModel, grads: dict, state: AdamState, cfg: SaeTrainConfig):
    """One in-place Adam update; decoder rows stay unit norm.

    The decoder gradient loses its component parallel to each row before the
    update, and rows are renormalized after it.
    """
    state.step += 1
    t = state.step
    b1, b2, lr, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate, cfg.adam_eps
    for name in PARAM_NAMES:
        param = getattr(model, name)
        g = grads[name]
        if name == "dec_weight":
            g = g - np.sum(g * param, axis=1, keepdims=True) * param
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
    _unit_rows(model.dec_weight)
    return model, state


# ---------------------------------------------------------------- training


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)

    def as_rows(self) -> list[tuple]:
        return [tuple(e.values()) for e in self.entries]


def batch_fvu(recon: np.ndarray, x: np.ndarray) -> float:
    num = np.mean((recon.astype(np.float64) - x) ** 2)
    den = np.mean((x - x.mean(axis=0, dtype=np.float64)) ** 2)
    return float(num / max(den, 1e-12))


def train(shards, whitener: wmod.Whitener | None, config: SaeTrainConfig,
          model: SaeModel | None = None) -> tuple[SaeModel, TrainLog]:
    """Train a TopK SAE on ``shards`` seen through ``whitener``.

    ``whitener=None`` trains on raw activations. Deterministic for a fixed
    config, seed and data.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    stream = sample_batches(shards, config.batch_size, seed=config.seed + 1)

    def next_batch():
        b = next(stream)
        return whitener.forward(b) if whitener is not None else b

    batch = next_batch()
    if model is None:
        model = init_model(batch.shape[1], config.d, config.k, rng, first_batch=batch)
    model.whitener = whitener
    model.validate()
    state = init_adam(model)
    tlog = TrainLog()
    for step in range(1, config.steps + 1):
        if step > 1:
            batch = next_batch()
        dead = model.tokens_since_fired >= config.dead_threshold_tokens
        res = loss_and_grads(model, batch, dead, config.aux_k, config.aux_coef)
        if not np.isfinite(res.loss):
            snapshot = {
                "step": step, "mse": res.mse, "aux_loss": res.aux_loss,
                "batch_abs_max": float(np.abs(batch).max()),
                "param_norms": {k: float(np.linalg.norm(v)) for k, v in model.params().items()},
            }
            raise TrainingDiverged(f"non-finite loss at step {step}", snapshot)
        fired = res.active.any(axis=0)
        model.tokens_since_fired += batch.shape[0]
        model.tokens_since_fired[fired] = 0
        adam_step(model, res.grads, state, config)
        if step % config.log_every == 0 or step == config.steps:
            entry = {
                "step": step,
                "loss": res.loss,
                "fvu": batch_fvu(res.recon, batch),
                "dead_fraction": float(np.mean(model.tokens_since_fired >= config.dead_threshold_tokens)),
            }
            tlog.entries.append(entry)
            log.debug("sae step", extra={"fields": entry})
    return model, tlog


# ---------------------------------------------------------------- persistence


def to_bytes(m: SaeModel) -> bytes:
    m.validate()
    dt = np.dtype(m.dtype)
    if dt not in _DTYPE_CODES:
        raise ValidationError(f"unsupported parameter dtype {dt}")
    w = Writer()
    w.raw(FILE_MAGIC)
    w.pack("BB", FILE_VERSION, _DTYPE_CODES[dt])
    w.pack("QQQ", m.n, m.d, m.k)
    w.pack("B", 1 if m.whitener is not None else 0)
    if m.whitener is not None:
        wmod.write_section(w, m.whitener)
    code = "f4" if dt == np.float32 else "f8"
    for name in PARAM_NAMES:
        w.array(getattr(m, name), code)
    w.array(m.tokens_since_fired, "i8")
    return w.getvalue()


def from_bytes(raw: bytes, name: str = "<bytes>") -> SaeModel:
    r = Reader(raw, name)
    check_magic(r, FILE_MAGIC, FILE_VERSION)
    (code,) = r.unpack("B")
    if code not in (1, 2):
        raise StorageError(f"{name}: unknown dtype code {code}")
    n, d, k = r.unpack("QQQ")
    (has_w,) = r.unpack("B")
    whitener = wmod.read_section(r) if has_w else None
    fmt = "f4" if code == 1 else "f8"
    arrays = {
        "enc_weight": r.array(fmt, (d, n)),
        "dec_weight": r.array(fmt, (d, n)),
        "b_pre": r.array(fmt, (n,)),
        "b_post": r.array(fmt, (n,)),
        "b_dec": r.array(fmt, (n,)),
    }
    tsf = r.array("i8", (d,))
    r.done()
    return SaeModel(**arrays, k=int(k), tokens_since_fired=tsf, whitener=whitener)


def save(m: SaeModel, path) -> None:
    try:
        Path(path).write_bytes(to_bytes(m))
    except OSError as exc:
        raise StorageError(f"cannot write model {path}: {exc}") from exc


def load(path) -> SaeModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read model {path}: {exc}") from exc
    return from_bytes(raw, str(path))


def config_dict(cfg: SaeTrainConfig) -> dict:
    return asdict(cfg)

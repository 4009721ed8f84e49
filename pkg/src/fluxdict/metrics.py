"""Reconstruction and health metrics. All accumulation is done in float64."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from . import itda as itda_mod
from . import sae as sae_mod
from .errors import ValidationError

DENOM_FLOOR = 1e-12


def _pair(y, y_star) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    y_star = np.asarray(y_star, dtype=np.float64)
    if y.shape != y_star.shape:
        raise ValidationError(f"shape mismatch: {y.shape} vs {y_star.shape}")
    if y.ndim == 1:
        y, y_star = y[:, None], y_star[:, None]
    return y, y_star


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def fvu(y, y_star) -> float:
    """Fraction of variance unexplained; ``y_star`` is the ground truth."""
    y, y_star = _pair(y, y_star)
    num = np.mean((y - y_star) ** 2)
    den = np.mean((y_star - y_star.mean(axis=0)) ** 2)
    return float(num / max(den, DENOM_FLOOR))


def variance_explained(y, y_star) -> float:
    """Mean over dimensions of the squared Pearson correlation.

    Dimensions where either side has (near) zero variance contribute 0.
    """
    y, y_star = _pair(y, y_star)
    if y.shape[0] < 2:
        raise ValidationError("variance_explained needs at least 2 rows")
    dy = y - y.mean(axis=0)
    ds = y_star - y_star.mean(axis=0)
    cov = np.mean(dy * ds, axis=0)
    var_y = np.mean(dy * dy, axis=0)
    var_s = np.mean(ds * ds, axis=0)
    ok = (var_y >= DENOM_FLOOR) & (var_s >= DENOM_FLOOR)
    r2 = np.zeros(y.shape[1])
    r2[ok] = cov[ok] ** 2 / (var_y[ok] * var_s[ok])
    return float(np.clip(r2, 0.0, 1.0).mean())


def model_kind(model) -> str:
    if isinstance(model, sae_mod.SaeModel):
        return "sae"
    if isinstance(model, itda_mod.ItdaModel):
        return "itda"
    raise ValidationError(f"unsupported model type {type(model).__name__}")


def model_codes(model, rows) -> np.ndarray:
    """Dense codes for rows given in the original activation space."""
    if model_kind(model) == "sae":
        return sae_mod.dense_codes(model, rows)
    return itda_mod.dense_codes(model, rows)


def model_reconstruct(model, rows) -> np.ndarray:
    if model_kind(model) == "sae":
        return sae_mod.reconstruct(model, rows)
    return itda_mod.reconstruct(model, rows)


def model_input_dim(model) -> int:
    return model.n


@dataclass
class DeadStats:
    dead_fraction: float
    mean_l0: float
    fire_counts: np.ndarray


def dead_and_l0(model, eval_rows, fire_eps: float = 0.0, chunk: int = 4096) -> DeadStats:
    """A latent is dead when its code never exceeds ``fire_eps`` on eval_rows."""
    eval_rows = np.asarray(eval_rows)
    d = model.d
    counts = np.zeros(d, dtype=np.int64)
    nnz = 0
    for start in range(0, eval_rows.shape[0], chunk):
        codes = model_codes(model, eval_rows[start:start + chunk])
        counts += (codes > fire_eps).sum(axis=0)
        nnz += int(np.count_nonzero(codes))
    n_rows = max(eval_rows.shape[0], 1)
    return DeadStats(float(np.mean(counts == 0)), nnz / n_rows, counts)


@dataclass
class EvalReport:
    fvu: float
    variance_explained: float
    mean_l0: float
    dead_fraction: float
    n_rows_evaluated: int
    model_kind: str
    k: int
    d: int
    layer_id: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model, rows, layer_id: int = 0) -> EvalReport:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValidationError("evaluation needs a nonempty row matrix")
    if rows.shape[1] != model.n:
        raise ValidationError(f"model input dim {model.n} does not match data dim {rows.shape[1]}")
    recon = model_reconstruct(model, rows)
    stats = dead_and_l0(model, rows)
    return EvalReport(
        fvu=fvu(recon, rows),
        variance_explained=variance_explained(recon, rows),
        mean_l0=stats.mean_l0,
        dead_fraction=stats.dead_fraction,
        n_rows_evaluated=rows.shape[0],
        model_kind=model_kind(model),
        k=model.k,
        d=model.d,
        layer_id=layer_id,
    )


def norm_profile(shards) -> list[dict]:
    """Per (layer_id, timestep) statistics of row L2 norms, sorted by key."""
    groups: dict[tuple[int, int], list[np.ndarray]] = defaultdict(list)
    for s in shards:
        groups[(s.layer_id, s.timestep)].append(np.linalg.norm(s.float_data().astype(np.float64), axis=1))
    table = []
    for (layer, step), parts in sorted(groups.items()):
        norms = np.concatenate(parts)
        if norms.size == 0:
            raise ValidationError(f"group layer={layer} timestep={step} is empty")
        table.append({
            "layer_id": layer,
            "timestep": step,
            "n_rows": int(norms.size),
            "mean": float(norms.mean()),
            "std": float(norms.std()),
            "p5": float(np.percentile(norms, 5)),
            "p95": float(np.percentile(norms, 95)),
        })
    return table

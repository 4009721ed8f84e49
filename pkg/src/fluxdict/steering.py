"""Region- and step-targeted activation addition with decoder features.

Decoder rows live in the model's normalized space. The steering vector for
feature ``f`` is that row pushed through the linear part of the inverse
normalization, ``W^T (row * comp_std)``; the mean term is left out because it
is not feature specific.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import itda as itda_mod
from . import sae as sae_mod
from .errors import StorageError, ValidationError

HOOK_SCHEMA = "fluxdict.hook-spec"
HOOK_VERSION = 1


@dataclass(frozen=True)
class SteeringSpec:
    feature_id: int
    scale: float = 1.0
    region: tuple[int, int, int, int] = (0, 1, 0, 1)
    step_range: tuple[int, int] = (0, 0)
    layer_id: int = 0
    model_ref: str = ""

    def validate(self, grid_shape: tuple[int, int] | None = None) -> None:
        a, b, c, d = self.region
        if self.step_range[0] > self.step_range[1]:
            raise ValidationError(f"step_range {self.step_range} is empty")
        if not (0 <= a < b and 0 <= c < d):
            raise ValidationError(f"region {self.region} is empty or negative")
        if grid_shape is not None:
            h, w = grid_shape
            if b > h or d > w:
                raise ValidationError(f"region {self.region} exceeds grid {h}x{w}")


def model_bytes(model) -> bytes:
    if isinstance(model, sae_mod.SaeModel):
        return sae_mod.to_bytes(model)
    if isinstance(model, itda_mod.ItdaModel):
        return itda_mod.to_bytes(model)
    raise ValidationError(f"unsupported model type {type(model).__name__}")


def model_hash(model) -> str:
    return hashlib.sha256(model_bytes(model)).hexdigest()


def steering_vector(model, feature_id: int) -> np.ndarray:
    """Feature direction in original activation space (float64)."""
    if isinstance(model, sae_mod.SaeModel):
        rows, norm = model.dec_weight, model.whitener
    elif isinstance(model, itda_mod.ItdaModel):
        rows, norm = model.atoms, model.normalizer
    else:
        raise ValidationError(f"unsupported model type {type(model).__name__}")
    if not 0 <= feature_id < rows.shape[0]:
        raise ValidationError(f"feature {feature_id} out of range for d={rows.shape[0]}")
    row = rows[feature_id].astype(np.float64)
    return row if norm is None else norm.fold_direction(row)


def apply_vector(activations: np.ndarray, vector: np.ndarray, spec: SteeringSpec) -> np.ndarray:
    acts = np.asarray(activations)
    if acts.ndim != 3:
        raise ValidationError(f"expected a (H, W, n) grid, got shape {acts.shape}")
    if acts.shape[2] != vector.shape[0]:
        raise ValidationError(f"grid width {acts.shape[2]} != steering vector dim {vector.shape[0]}")
    spec.validate(acts.shape[:2])
    a, b, c, d = spec.region
    out = acts.copy()
    out[a:b, c:d] += (spec.scale * vector).astype(out.dtype)
    return out


def apply_steering(activations, spec: SteeringSpec, model) -> np.ndarray:
    """Return a copy of the grid with ``scale * v_f`` added inside the region."""
    return apply_vector(activations, steering_vector(model, spec.feature_id), spec)


# ---------------------------------------------------------------- hook files


@dataclass
class HookSpec:
    spec: SteeringSpec
    vector: np.ndarray
    model_hash: str
    stale: bool = False


def export_hook_spec(spec: SteeringSpec, model, out_path) -> dict:
    """Write the unscaled direction plus its scale; consumers add ``scale * vector``."""
    vec = steering_vector(model, spec.feature_id)
    spec.validate()
    digest = model_hash(model)
    doc = {
        "schema": HOOK_SCHEMA,
        "version": HOOK_VERSION,
        "feature_id": int(spec.feature_id),
        "scale": float(spec.scale),
        "region": [int(v) for v in spec.region],
        "step_range": [int(v) for v in spec.step_range],
        "layer_id": int(spec.layer_id),
        "model_hash": digest,
        "dim": int(vec.shape[0]),
        "vector": [float(v) for v in vec.astype(np.float32)],
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    try:
        Path(out_path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write hook spec {out_path}: {exc}") from exc
    return doc


def load_hook_spec(path, model=None) -> HookSpec:
    """Read a hook file; ``stale`` is set when ``model`` hashes differently."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise StorageError(f"cannot read hook spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise StorageError(f"{path}: malformed hook spec: {exc}") from exc
    if doc.get("schema") != HOOK_SCHEMA or doc.get("version") != HOOK_VERSION:
        raise StorageError(f"{path}: unsupported hook spec schema/version")
    vec = np.asarray(doc["vector"], dtype=np.float32)
    if vec.shape[0] != doc["dim"]:
        raise StorageError(f"{path}: vector length does not match dim")
    spec = SteeringSpec(
        feature_id=doc["feature_id"], scale=doc["scale"], region=tuple(doc["region"]),
        step_range=tuple(doc["step_range"]), layer_id=doc["layer_id"], model_ref=doc["model_hash"],
    )
    stale = model is not None and model_hash(model) != doc["model_hash"]
    return HookSpec(spec, vec, doc["model_hash"], stale)

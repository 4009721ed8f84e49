"""Max-activating example collection, explanation and detection scoring."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from PIL import Image

from .. import itda as itda_mod
from .. import sae as sae_mod
from ..errors import BackendError, ValidationError
from .backend import ImagePart, MalformedResponse, MockBackend, TextPart, parse_score
from .prompts import EXPLAINER_PROMPT, judge_prompt
from .render import encode_png, render_overlay

log = logging.getLogger(__name__)

JUDGE_THRESHOLD = 0.5
HIST_BINS = 10


class NeuronBaseline:
    """Raw activation dimensions treated as features."""

    def __init__(self, dim: int):
        self.d = dim

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64)


class RandomDirections:
    """Projections onto random unit directions; a no-learning baseline."""

    def __init__(self, n_features: int, dim: int, seed: int = 0):
        v = np.random.default_rng(seed).standard_normal((n_features, dim))
        self.directions = v / np.linalg.norm(v, axis=1, keepdims=True)
        self.d = n_features

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64) @ self.directions.T


def feature_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, sae_mod.SaeModel):
        return lambda rows: sae_mod.dense_codes(model, rows)
    if isinstance(model, itda_mod.ItdaModel):
        return lambda rows: itda_mod.dense_codes(model, rows)
    if callable(model):
        return model
    raise ValidationError(f"cannot extract features from {type(model).__name__}")


class ImageStore(Mapping):
    """Lazy ``image_ref -> RGB array`` view over a directory of ``<ref>.png``."""

    def __init__(self, root):
        self.root = Path(root)

    def __getitem__(self, ref):
        path = self.root / f"{ref}.png"
        if not path.exists():
            raise KeyError(ref)
        return np.asarray(Image.open(path).convert("RGB"))

    def __iter__(self):
        return (p.stem for p in sorted(self.root.glob("*.png")))

    def __len__(self):
        return sum(1 for _ in self.root.glob("*.png"))


@dataclass
class Example:
    image_index: int
    image_ref: str
    grid_shape: tuple[int, int]
    grid: np.ndarray
    max_activation: float


@dataclass
class FeatureRecord:
    feature_id: int
    top_examples: list[Example]
    quantile_examples: list[Example] = field(default_factory=list)
    negative_examples: list[Example] = field(default_factory=list)
    explanation: str | None = None
    detection_score: float | None = None
    flags: list[str] = field(default_factory=list)
    raw_reply: str | None = None

    def summary(self) -> dict:
        return {
            "feature_id": self.feature_id,
            "explanation": self.explanation,
            "detection_score": self.detection_score,
            "flags": list(self.flags),
            "top_refs": [e.image_ref for e in self.top_examples],
            "top_activations": [e.max_activation for e in self.top_examples],
        }


class ActivationIndex:
    """Per-image feature maxima plus on-demand per-patch grids."""

    def __init__(self, shards, fn):
        self.shards = list(shards)
        self.fn = fn
        self.locations: list[tuple[int, int]] = []
        self.refs: list[str] = []
        self.grid_shapes: list[tuple[int, int]] = []
        for si, s in enumerate(self.shards):
            if s.grid_shape is None or s.image_refs is None:
                raise ValidationError(f"shard {si} lacks grid_shape/image_refs metadata")
            for ii in range(s.n_images):
                self.locations.append((si, ii))
                self.refs.append(s.image_refs[ii])
                self.grid_shapes.append(s.grid_shape)
        if not self.locations:
            raise ValidationError("no images in the given shards")
        maxima = []
        for s in self.shards:
            ppi = s.patches_per_image
            rows = s.float_data()
            step = max(1, 4096 // ppi)
            for start in range(0, s.n_images, step):
                stop = min(start + step, s.n_images)
                codes = np.asarray(self.fn(rows[start * ppi:stop * ppi]))
                maxima.append(codes.reshape(stop - start, ppi, -1).max(axis=1))
        self.image_max = np.concatenate(maxima)
        self.ref_rank = np.argsort(np.argsort(np.asarray(self.refs), kind="stable"), kind="stable")
        self._cache: dict[int, np.ndarray] = {}

    @property
    def n_images(self) -> int:
        return len(self.locations)

    @property
    def n_features(self) -> int:
        return self.image_max.shape[1]

    def codes(self, image_index: int) -> np.ndarray:
        if image_index not in self._cache:
            if len(self._cache) > 256:
                self._cache.clear()
            si, ii = self.locations[image_index]
            self._cache[image_index] = np.asarray(self.fn(self.shards[si].image_rows(ii)))
        return self._cache[image_index]

    def grid(self, image_index: int, feature: int) -> np.ndarray:
        return self.codes(image_index)[:, feature].reshape(self.grid_shapes[image_index])

    def example(self, image_index: int, feature: int) -> Example:
        return Example(
            image_index, self.refs[image_index], self.grid_shapes[image_index],
            self.grid(image_index, feature), float(self.image_max[image_index, feature]),
        )


@dataclass
class FeatureSet:
    records: dict[int, FeatureRecord]
    non_activating: list[int]
    index: ActivationIndex
    fire_threshold: float = 0.0


def collect_top_examples(model, shards, per_feature: int = 9, reservoir_quantiles: int = 4,
                         per_quantile: int = 2, n_negatives: int = 8, seed: int = 0,
                         features=None, fire_threshold: float = 0.0) -> FeatureSet:
    """Top images per feature plus stratified held-out positives and negatives.

    An image activates a feature when its max patch activation exceeds
    ``fire_threshold``. Features that never fire are listed in
    ``non_activating`` and get no record.
    """
    index = ActivationIndex(shards, feature_fn(model))
    feats = range(index.n_features) if features is None else features
    records: dict[int, FeatureRecord] = {}
    dead: list[int] = []
    for f in feats:
        col = index.image_max[:, f]
        firing = np.flatnonzero(col > fire_threshold)
        if firing.size == 0:
            dead.append(int(f))
            continue
        order = firing[np.lexsort((index.ref_rank[firing], -col[firing]))]
        top = order[:per_feature]
        rest = order[per_feature:]
        rng = np.random.default_rng([seed, int(f)])
        held = []
        if rest.size:
            for part in np.array_split(rest, min(reservoir_quantiles, rest.size)):
                take = min(per_quantile, part.size)
                held.extend(sorted(rng.choice(part, size=take, replace=False).tolist()))
        quiet = np.flatnonzero(col <= fire_threshold)
        negs = sorted(rng.choice(quiet, size=min(n_negatives, quiet.size), replace=False).tolist()) if quiet.size else []
        records[int(f)] = FeatureRecord(
            int(f),
            [index.example(int(i), f) for i in top],
            [index.example(int(i), f) for i in held],
            [index.example(int(i), f) for i in negs],
        )
    return FeatureSet(records, dead, index, fire_threshold)


def explain(record: FeatureRecord, backend, images: Mapping[str, np.ndarray]) -> str | None:
    """Ask the backend for a common pattern across the top examples.

    Backend failure marks the record ``unexplained`` instead of raising.
    """
    if not record.top_examples:
        raise ValidationError(f"feature {record.feature_id} has no top examples")
    parts: list = [TextPart(EXPLAINER_PROMPT)]
    for ex in record.top_examples:
        png = encode_png(render_overlay(images[ex.image_ref], ex.grid))
        parts.append(ImagePart(png, {"image_ref": ex.image_ref, "grid": ex.grid}))
    try:
        reply = backend.complete(parts)
    except MalformedResponse as exc:
        log.warning("feature %d: malformed explainer reply", record.feature_id)
        record.raw_reply = exc.raw.decode("utf-8", errors="replace")
        record.flags.append("malformed")
        return None
    except BackendError as exc:
        log.warning("feature %d unexplained: %s", record.feature_id, exc)
        record.flags.append("unexplained")
        return None
    record.raw_reply = reply
    text = (reply or "").strip()
    if not text:
        record.flags.append("malformed")
        return None
    record.explanation = text
    return text


def detection_score(record: FeatureRecord, backend, fs: FeatureSet, images: Mapping[str, np.ndarray],
                    n_pos: int = 5, n_neg: int = 5, seed: int = 0) -> float:
    """Balanced detection accuracy of the judge against the explanation.

    Negatives are overlaid with a different feature's grid on the same image
    (or shown plain when nothing else fires there), so tint alone gives no
    signal.
    """
    if n_pos + n_neg == 0:
        raise ValidationError("need n_pos + n_neg > 0")
    if record.explanation is None:
        raise ValidationError(f"feature {record.feature_id} has no explanation")
    rng = np.random.default_rng([seed, record.feature_id, 1])
    pos_pool = record.quantile_examples + record.top_examples
    positives = pos_pool[:n_pos]
    negatives = record.negative_examples[:n_neg]
    if len(positives) < n_pos or len(negatives) < n_neg:
        record.flags.append("coverage")
    items = []
    for ex in positives:
        items.append((True, ex.image_ref, ex.grid))
    others = list(fs.records)
    for ex in negatives:
        candidates = [f for f in others if f != record.feature_id and fs.index.image_max[ex.image_index, f] > fs.fire_threshold]
        if candidates:
            other = int(rng.choice(candidates))
            grid = fs.index.grid(ex.image_index, other)
        else:
            grid = np.zeros(ex.grid_shape)
        items.append((False, ex.image_ref, grid))
    if not items:
        raise ValidationError(f"feature {record.feature_id}: no examples available to score")
    order = rng.permutation(len(items))
    prompt = judge_prompt(record.explanation)
    correct = 0
    answered = 0
    for i in order:
        is_pos, ref, grid = items[i]
        png = encode_png(render_overlay(images[ref], grid))
        try:
            reply = backend.complete([TextPart(prompt), ImagePart(png, {"image_ref": ref, "grid": grid})])
        except BackendError:
            if "judge_failed" not in record.flags:
                record.flags.append("judge_failed")
            continue
        score = parse_score(reply)
        if score is None:
            if "malformed_judge" not in record.flags:
                record.flags.append("malformed_judge")
            score = 0.0
        answered += 1
        correct += int((score >= JUDGE_THRESHOLD) == is_pos)
    acc = correct / answered if answered else 0.0
    record.detection_score = acc
    return acc


def _process(record, backend, fs, images, n_pos, n_neg, seed):
    if explain(record, backend, images) is not None:
        detection_score(record, backend, fs, images, n_pos, n_neg, seed)
    return record


def run_pipeline(fs: FeatureSet, backend, images, n_pos: int = 5, n_neg: int = 5, seed: int = 0,
                 max_in_flight: int = 4) -> list[FeatureRecord]:
    """Explain and score every record; results sorted by feature id."""
    records = [fs.records[f] for f in sorted(fs.records)]
    if isinstance(backend, MockBackend) or max_in_flight <= 1:
        done = [_process(r, backend, fs, images, n_pos, n_neg, seed) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            done = list(pool.map(lambda r: _process(r, backend, fs, images, n_pos, n_neg, seed), records))
    return sorted(done, key=lambda r: r.feature_id)


def histogram(scores) -> list[int]:
    counts, _ = np.histogram(np.asarray(scores, dtype=np.float64), bins=HIST_BINS, range=(0.0, 1.0))
    return counts.astype(int).tolist()


@dataclass
class ScoreTable:
    scores: dict[str, list[float]]
    histograms: dict[str, list[int]]
    records: dict[str, list[FeatureRecord]]

    def mean(self, method: str) -> float | None:
        s = self.scores[method]
        return float(np.mean(s)) if s else None

    def to_dict(self) -> dict:
        return {
            "bins": np.linspace(0, 1, HIST_BINS + 1).round(3).tolist(),
            "methods": {
                name: {
                    "mean": self.mean(name),
                    "scores": self.scores[name],
                    "histogram": self.histograms[name],
                    "features": [r.summary() for r in self.records[name]],
                }
                for name in self.scores
            },
        }


def score_feature_set(methods: Mapping[str, tuple], images, backend, per_feature: int = 9,
                      n_pos: int = 5, n_neg: int = 5, seed: int = 0, max_in_flight: int = 4,
                      max_features: int | None = None, **collect_kw) -> ScoreTable:
    """Run the pipeline per method. ``methods`` maps a name to (model, shards)."""
    scores, hists, recs = {}, {}, {}
    for name, (model, shards) in methods.items():
        fs = collect_top_examples(model, shards, per_feature=per_feature, seed=seed, **collect_kw)
        if max_features is not None:
            keep = sorted(fs.records)[:max_features]
            fs.records = {f: fs.records[f] for f in keep}
        done = run_pipeline(fs, backend, images, n_pos, n_neg, seed, max_in_flight)
        recs[name] = done
        scores[name] = [r.detection_score for r in done if r.detection_score is not None]
        hists[name] = histogram(scores[name])
    return ScoreTable(scores, hists, recs)

"""``fluxdict`` command line entry point.

Every run writes ``<out>.manifest.json`` next to its primary output holding
the resolved configuration, input file hashes and toolkit version. Passing a
manifest back through ``--config`` (with a new ``--out``) reproduces the run.

Exit codes: 0 success, 1 validation error, 2 I/O or backend error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, _kernels, actstore, itda, metrics, sae, steering, whitening
from .errors import BackendError, FluxDictError, StorageError, TrainingDiverged, ValidationError

log = logging.getLogger("fluxdict")

COMMANDS = ("synth", "whiten-fit", "spectrum", "train-sae", "train-itda", "eval",
            "autointerp", "steer", "norm-profile")
_NOT_CONFIG = {"config", "func", "log_level"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        doc = {"level": record.levelname, "logger": record.name, "msg": record.getMessage()}
        fields = getattr(record, "fields", None)
        if fields:
            doc.update(fields)
        return json.dumps(doc, sort_keys=True, default=str)


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("fluxdict")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_shards(paths) -> list:
    return [actstore.read_shard(p) for p in paths]


def load_model(path):
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
    except OSError as exc:
        raise StorageError(f"cannot read model {path}: {exc}") from exc
    if magic == sae.FILE_MAGIC:
        return sae.load(path)
    if magic == itda.FILE_MAGIC:
        return itda.load(path)
    raise StorageError(f"{path}: not a fluxdict model file (magic {magic!r})")


def _write_json(path, doc) -> None:
    try:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    if not out.parent.exists():
        raise StorageError(f"output directory {out.parent} does not exist")
    return out.parent


# ---------------------------------------------------------------- handlers
# Each handler returns the list of input files it read.


def cmd_synth(args):
    _out_dir(args)
    out = Path(args.out)
    if args.mode == "planted_images":
        gh, gw = (int(v) for v in args.grid.lower().split("x"))
        data = actstore.generate_planted_images(
            n_images=args.rows, n_features=args.atoms, hidden_dim=args.dim, grid_shape=(gh, gw),
            patch_px=args.patch_px, noise_std=args.noise, seed=args.seed,
            layer_id=args.layer, timestep=args.timestep,
        )
        actstore.write_shard(data.shard, out)
        img_dir = out.with_name(out.name + ".images")
        img_dir.mkdir(exist_ok=True)
        from .autointerp.render import encode_png

        for ref, img in data.images.items():
            (img_dir / f"{ref}.png").write_bytes(encode_png(img))
        _write_json(out.with_name(out.name + ".labels.json"),
                    {"patch_labels": data.patch_labels, "feature_labels": data.feature_labels})
        np.savez(out.with_name(out.name + ".truth.npz"), atoms=data.atoms)
        return []
    spec = actstore.SyntheticSpec(
        mode=args.mode, hidden_dim=args.dim, n_rows=args.rows, spectrum_exponent=args.alpha,
        planted_dict_size=args.atoms, planted_sparsity=args.sparsity, noise_std=args.noise,
        seed=args.seed, mean_scale=args.mean_scale, layer_id=args.layer, timestep=args.timestep,
    )
    data = actstore.generate(spec)
    actstore.write_shard(data.shard, out)
    if data.atoms is not None:
        np.savez(out.with_name(out.name + ".truth.npz"), atoms=data.atoms, codes=data.codes)
    return []


def cmd_whiten_fit(args):
    _out_dir(args)
    shards = _load_shards(args.inputs)
    batches = actstore.sample_batches(shards, args.batch_size, seed=args.seed, epochs=1)
    wh = whitening.fit_from_batches(batches, args.fit_batches, rotate=not args.standardize_only)
    for note in wh.warnings:
        log.warning(note)
    whitening.save(wh, args.out)
    return args.inputs


def cmd_spectrum(args):
    shards = _load_shards(args.inputs)
    rows = np.concatenate([s.float_data() for s in shards])
    spec = whitening.spectrum(rows)
    doc = {
        "eigenvalues": spec.eigenvalues.tolist(),
        "top_fraction": {str(k): v for k, v in spec.top_fraction.items()},
    }
    if args.out:
        _out_dir(args)
        _write_json(args.out, doc)
    else:
        print(json.dumps({"top_fraction": doc["top_fraction"]}, sort_keys=True))
    return args.inputs


def cmd_train_sae(args):
    _out_dir(args)
    shards = _load_shards(args.data)
    n = shards[0].hidden_dim
    d = max(1, int(round(args.dim_ratio * n)))
    inputs = list(args.data)
    if args.no_whiten:
        wh = None
    elif args.whitener:
        wh = whitening.load(args.whitener)
        inputs.append(args.whitener)
    else:
        fit_stream = actstore.sample_batches(shards, args.batch_size, seed=args.seed, epochs=1)
        wh = whitening.fit_from_batches(fit_stream, args.fit_batches)
    cfg = sae.SaeTrainConfig(
        d=d, k=args.k, steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr,
        aux_k=min(args.aux_k, d), aux_coef=args.aux_coef,
        dead_threshold_tokens=args.dead_threshold, seed=args.seed,
    )
    model, tlog = sae.train(shards, wh, cfg)
    sae.save(model, args.out)
    out = Path(args.out)
    _write_json(out.with_name(out.name + ".log.json"), {"config": asdict(cfg), "log": tlog.entries})
    return inputs


def cmd_train_itda(args):
    _out_dir(args)
    shards = _load_shards(args.data)
    cfg = itda.ItdaConfig(threshold=args.threshold, k=args.k, max_dict=args.max_dict, seed=args.seed,
                          batch_size=args.batch_size, error_mode=args.error_mode)
    model, glog = itda.itda_train(shards, cfg)
    itda.save(model, args.out)
    out = Path(args.out)
    _write_json(out.with_name(out.name + ".log.json"),
                {"config": asdict(cfg), "growth": [list(e) for e in glog.entries]})
    return args.data


def cmd_eval(args):
    _out_dir(args)
    model = load_model(args.model)
    shards = _load_shards(args.data)
    rows = np.concatenate([s.float_data() for s in shards])
    if rows.shape[1] != model.n:
        raise ValidationError(f"model input dim {model.n} does not match data dim {rows.shape[1]}")
    report = metrics.evaluate(model, rows, layer_id=shards[0].layer_id)
    doc = report.to_dict()
    doc["config"] = {"model": str(args.model), "data": [str(p) for p in args.data]}
    _write_json(args.out, doc)
    return [args.model, *args.data]


def _backend_config(args):
    from .autointerp import BackendConfig

    if args.mock:
        return BackendConfig(mock_mode=True)
    if not args.backend:
        raise ValidationError("--backend is required unless --mock is given")
    if Path(args.backend).is_file():
        doc = json.loads(Path(args.backend).read_text(encoding="utf-8"))
        return BackendConfig(**doc)
    return BackendConfig(endpoint=args.backend)


def cmd_autointerp(args):
    from .autointerp import ImageStore, NeuronBaseline, make_backend, score_feature_set

    _out_dir(args)
    shards = _load_shards(args.data)
    methods = {}
    inputs = [*args.data]
    for i, path in enumerate(args.model or []):
        model = load_model(path)
        name = f"{metrics.model_kind(model)}{i if len(args.model) > 1 else ''}"
        methods[name] = (model, shards)
        inputs.append(path)
    if args.baseline:
        methods["mlp-baseline"] = (NeuronBaseline(shards[0].hidden_dim), _load_shards(args.baseline))
        inputs.extend(args.baseline)
    if not methods:
        raise ValidationError("give at least one --model or --baseline")
    labels = None
    if args.labels:
        labels = json.loads(Path(args.labels).read_text(encoding="utf-8"))["patch_labels"]
        inputs.append(args.labels)
    config = _backend_config(args)
    backend = make_backend(config, patch_labels=labels, seed=args.seed)
    table = score_feature_set(
        methods, ImageStore(args.images), backend, per_feature=args.per_feature, n_pos=args.n_pos,
        n_neg=args.n_neg, seed=args.seed, max_in_flight=config.max_in_flight,
        max_features=args.max_features, fire_threshold=args.fire_threshold,
    )
    _write_json(args.out, table.to_dict())
    return inputs


def _parse_region(text: str) -> tuple[int, int, int, int]:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 4:
        raise ValidationError(f"region must be a,b,c,d; got {text!r}")
    return tuple(parts)


def _parse_steps(text: str) -> tuple[int, int]:
    a, _, b = text.partition(":")
    return int(a), int(b or a)


def cmd_steer(args):
    _out_dir(args)
    model = load_model(args.model)
    spec = steering.SteeringSpec(
        feature_id=args.feature, scale=args.scale, region=_parse_region(args.region),
        step_range=_parse_steps(args.steps), layer_id=args.layer, model_ref=steering.model_hash(model),
    )
    steering.export_hook_spec(spec, model, args.out)
    return [args.model]


def cmd_norm_profile(args):
    shards = _load_shards(args.data)
    table = metrics.norm_profile(shards)
    if args.out:
        _out_dir(args)
        _write_json(args.out, {"profile": table})
    else:
        for row in table:
            print(json.dumps(row, sort_keys=True))
    return args.data


# ---------------------------------------------------------------- parser


REQUIRED = {
    "synth": ["out"], "whiten-fit": ["inputs", "out"], "spectrum": ["inputs"],
    "train-sae": ["data", "out"], "train-itda": ["data", "out"], "eval": ["model", "data", "out"],
    "autointerp": ["data", "images", "out"], "steer": ["model", "feature", "out"],
    "norm-profile": ["data"],
}


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON config file or a previous run's manifest")
    common.add_argument("--log-level", default="INFO")

    parser = _Parser(prog="fluxdict", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("synth", cmd_synth, "generate a synthetic activation shard")
    p.add_argument("--mode", default="anisotropic_gaussian",
                   choices=["anisotropic_gaussian", "planted_dictionary", "planted_images"])
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--rows", type=int, default=10_000, help="rows (images for planted_images)")
    p.add_argument("--alpha", type=float, default=1.0, help="eigenvalue decay exponent")
    p.add_argument("--atoms", type=int, default=32)
    p.add_argument("--sparsity", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--mean-scale", type=float, default=1.0)
    p.add_argument("--grid", default="4x4")
    p.add_argument("--patch-px", type=int, default=8)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--timestep", type=int, default=0)
    p.add_argument("--out")

    p = add("whiten-fit", cmd_whiten_fit, "fit a PCA whitener")
    p.add_argument("--in", dest="inputs", nargs="+")
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--fit-batches", type=int, default=100)
    p.add_argument("--standardize-only", action="store_true")
    p.add_argument("--out")

    p = add("spectrum", cmd_spectrum, "PCA variance spectrum of shards")
    p.add_argument("--in", dest="inputs", nargs="+")
    p.add_argument("--out")

    p = add("train-sae", cmd_train_sae, "train a TopK sparse autoencoder")
    p.add_argument("--data", nargs="+")
    p.add_argument("--dim-ratio", type=float, default=8.0)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--steps", type=int, default=30_000)
    p.add_argument("--lr", type=float, default=4e-4)
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--aux-k", type=int, default=64)
    p.add_argument("--aux-coef", type=float, default=1.0 / 32)
    p.add_argument("--dead-threshold", type=int, default=200_000)
    p.add_argument("--whitener")
    p.add_argument("--no-whiten", action="store_true")
    p.add_argument("--fit-batches", type=int, default=100)
    p.add_argument("--out")

    p = add("train-itda", cmd_train_itda, "grow an ITDA dictionary")
    p.add_argument("--data", nargs="+")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--max-dict", type=int, default=4096)
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--error-mode", choices=["fvu", "mse"], default="fvu")
    p.add_argument("--out")

    p = add("eval", cmd_eval, "reconstruction and health metrics")
    p.add_argument("--model")
    p.add_argument("--data", nargs="+")
    p.add_argument("--out")

    p = add("autointerp", cmd_autointerp, "explain and score features")
    p.add_argument("--model", action="append")
    p.add_argument("--baseline", nargs="+", help="shards whose raw dims act as baseline neurons")
    p.add_argument("--data", nargs="+")
    p.add_argument("--images")
    p.add_argument("--backend", help="endpoint URL or backend config JSON")
    p.add_argument("--mock", action="store_true")
    p.add_argument("--labels", help="planted patch labels for the mock backend")
    p.add_argument("--per-feature", type=int, default=9)
    p.add_argument("--n-pos", type=int, default=5)
    p.add_argument("--n-neg", type=int, default=5)
    p.add_argument("--fire-threshold", type=float, default=0.0)
    p.add_argument("--max-features", type=int)
    p.add_argument("--out")

    p = add("steer", cmd_steer, "export a steering hook spec")
    p.add_argument("--model")
    p.add_argument("--feature", type=int)
    p.add_argument("--region", default="0,1,0,1")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--steps", default="0:0")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out")

    p = add("norm-profile", cmd_norm_profile, "row-norm statistics per layer/timestep")
    p.add_argument("--data", nargs="+")
    p.add_argument("--out")
    return parser, subs


def _load_config(path, command: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if "config" in doc and "command" in doc:
        if doc["command"] != command:
            raise ValidationError(f"manifest is for {doc['command']!r}, not {command!r}")
        doc = doc["config"]
    return {k.replace("-", "_"): v for k, v in doc.items()}


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_CONFIG and k != "command"}


def write_manifest(args, inputs) -> Path:
    out = Path(args.out)
    manifest = out.with_name(out.name + ".manifest.json")
    doc = {
        "toolkit": "fluxdict",
        "version": __version__,
        "kernel_backend": _kernels.backend_name(),
        "command": args.command,
        "config": _resolved(args),
        "inputs": {str(p): _sha256(p) for p in inputs},
    }
    _write_json(manifest, doc)
    return manifest


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        _setup_logging(args.log_level)
        if args.config:
            subs[args.command].set_defaults(**_load_config(args.config, args.command))
            args = parser.parse_args(argv)
        missing = [name for name in REQUIRED[args.command] if getattr(args, name, None) is None]
        if missing:
            raise ValidationError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
        inputs = args.func(args) or []
        if getattr(args, "out", None):
            write_manifest(args, inputs)
        return 0
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ValidationError, TrainingDiverged) as exc:
        log.error(str(exc), extra={"fields": {"error": type(exc).__name__}})
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (StorageError, BackendError, OSError) as exc:
        log.error(str(exc), extra={"fields": {"error": type(exc).__name__}})
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FluxDictError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

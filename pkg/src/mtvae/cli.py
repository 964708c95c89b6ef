"""
Command-line entry point: ``mtvae <subcommand> ...``.

Every subcommand is a thin adapter over the library.  Failures print one
line ``error: <kind>: <message>`` to stderr and exit nonzero.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__, data, evaluation, models, render, train

VARIANT_FLAGS = {
    "pred-lstm": models.PREDICTION_LSTM,
    "vanilla-vae": models.VANILLA_VAE,
    "mtvae-concat": models.MTVAE_CONCAT,
    "mtvae-add": models.MTVAE_ADD,
}
CHECKPOINT_NAME = "model.ckpt"
TRACE_NAME = "trace.tsv"
MANIFEST_NAME = "run.json"


class CliError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int
    version: str = __version__
    timings: dict = field(default_factory=dict)

    def write(self, path):
        data.atomic_write(path, json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# ---------------------------------------------------------------------------
# config files


def parse_value(text):
    text = text.strip()
    if "," in text:
        return tuple(parse_value(t) for t in text.split(",") if t.strip())
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config(path):
    """Flat ``key = value`` text; ``#`` starts a comment; commas make tuples."""
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = parse_value(value)
    return out


def _split_config(cfg):
    model_keys = {f.name for f in fields(models.ModelConfig)}
    train_keys = {f.name for f in fields(train.TrainConfig)}
    unknown = set(cfg) - model_keys - train_keys
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return ({k: v for k, v in cfg.items() if k in model_keys},
            {k: v for k, v in cfg.items() if k in train_keys})


# ---------------------------------------------------------------------------
# helpers


def _require(path, what):
    if path is None or not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _checkpoint_path(path):
    _require(path, "checkpoint")
    return os.path.join(path, CHECKPOINT_NAME) if os.path.isdir(path) else path


def _load_model(path):
    ck = train.load_checkpoint(_require(_checkpoint_path(path), "checkpoint"))
    return ck, evaluation.Model(ck.model_config, ck.params)


def _first_record(path, what):
    ds = data.load_dataset(_require(path, what))
    return ds.records[0]


def _context_of(record, observed):
    split = record.labels.get("split", observed or record.length)
    return record.frames[:split], record.frames[split:]


def _records_text(prefix, frames_list, labels=None):
    lines = []
    for k, frames in enumerate(frames_list):
        rec = {"id": f"{prefix}-{k:04d}", "d": int(frames.shape[-1]), "frames": np.asarray(frames).tolist()}
        rec.update(labels or {})
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        data.atomic_write(out, text)


def _manifest_path(out):
    return os.path.join(out, MANIFEST_NAME) if os.path.isdir(out) else out + "." + MANIFEST_NAME


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    t0 = time.perf_counter()
    if args.spec == "default":
        spec_dict = {}
    elif args.spec.endswith(".json"):
        with open(_require(args.spec, "spec file")) as fh:
            spec_dict = json.load(fh)
    else:
        spec_dict = read_config(args.spec)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = data.SyntheticSpec.from_dict(spec_dict)
    splits = data.gen_synthetic(spec)
    stats = data.NormalizationStats.from_dataset(splits["train"])
    data.save_splits(args.out, splits, stats, spec)
    RunManifest("gen-data", spec.to_dict(), {"spec": args.spec},
                {name: os.path.join(args.out, f"{name}.jsonl") for name in splits}, spec.seed,
                timings={"total_s": time.perf_counter() - t0}).write(os.path.join(args.out, MANIFEST_NAME))
    print(f"wrote {sum(len(s) for s in splits.values())} sequences to {args.out}")


def cmd_train(args):
    t0 = time.perf_counter()
    splits, manifest = data.load_splits(_require(args.data, "data directory"))
    if "train" not in splits:
        raise CliError(f"{args.data}: no train split")
    file_cfg = read_config(args.config) if args.config else {}
    model_cfg, train_cfg = _split_config(file_cfg)
    spec = manifest.get("synthetic_spec")
    if spec:
        model_cfg.setdefault("observed_range", tuple(spec["observed_range"]))
        model_cfg.setdefault("future", spec["future"])
    model_cfg["dim"] = splits["train"].dim
    if args.variant:
        model_cfg["variant"] = VARIANT_FLAGS[args.variant]
    if args.context_free:
        model_cfg["context_free"] = True
    if args.steps is not None:
        train_cfg["total_steps"] = args.steps
    if args.seed is not None:
        train_cfg["seed"] = args.seed
    train_cfg.setdefault("observed_range", model_cfg.get("observed_range", (8, 12)))

    resume = None
    if args.resume:
        resume = train.load_checkpoint(_checkpoint_path(args.resume))
        mc = resume.model_config
        tc = train.TrainConfig.from_dict({**resume.train_config.to_dict(), **train_cfg})
    else:
        mc = models.ModelConfig(**model_cfg)
        tc = train.TrainConfig(**train_cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, CHECKPOINT_NAME)
    trace = os.path.join(args.out, TRACE_NAME)
    train.train(mc, splits["train"], tc, resume=resume, trace_path=trace, checkpoint_path=ckpt)
    RunManifest("train", {"model": mc.to_dict(), "train": tc.to_dict()},
                {"data": args.data, "config": args.config, "resume": args.resume},
                {"checkpoint": ckpt, "trace": trace}, tc.seed,
                timings={"total_s": time.perf_counter() - t0}).write(os.path.join(args.out, MANIFEST_NAME))
    print(f"trained {mc.variant} for {tc.total_steps} steps -> {ckpt}")


def sample_frames(model, record, n, horizon, source, seed):
    """The library call behind ``sample``: (n, horizon, D) futures for one record."""
    rng = np.random.default_rng(seed)
    context, future = _context_of(record, model.config.observed_range[1])
    horizon = horizon or model.config.future
    if source == "posterior":
        if not model.config.is_vae:
            raise CliError("PredictionLSTM has no recognition model; use --from prior")
        if len(future) < horizon:
            raise CliError(f"record {record.id!r} has {len(future)} future frames, posterior needs {horizon}")
        return evaluation.posterior_samples(model, context, future[:horizon], n, rng)
    return evaluation.prior_samples(model, context, n, horizon, rng)


def cmd_sample(args):
    t0 = time.perf_counter()
    _, model = _load_model(args.ckpt)
    record = _first_record(args.context, "context file")
    frames = sample_frames(model, record, args.n, args.horizon, args.source, args.seed)
    _emit(_records_text(f"{record.id}-{args.source}", frames, {"source": args.source}), args.out)
    if args.out:
        RunManifest("sample", {"n": args.n, "horizon": args.horizon, "from": args.source},
                    {"ckpt": args.ckpt, "context": args.context}, {"samples": args.out}, args.seed,
                    timings={"total_s": time.perf_counter() - t0}).write(_manifest_path(args.out))


def cmd_eval(args):
    t0 = time.perf_counter()
    _, model = _load_model(args.ckpt)
    splits, manifest = data.load_splits(_require(args.data, "data directory"))
    if args.split not in splits:
        raise CliError(f"{args.data}: no {args.split!r} split")
    spec = data.SyntheticSpec.from_dict(manifest["synthetic_spec"]) if manifest.get("synthetic_spec") else None
    bandwidth = 0.0 if args.bandwidth == "auto" else float(args.bandwidth)
    cfg = evaluation.EvalConfig(samples_rmse=args.samples_rmse, samples_smse=args.samples_smse,
                                stride=args.stride, bandwidth=bandwidth, seed=args.seed)
    report = evaluation.evaluate(model, splits[args.split], cfg, spec=spec, validation=splits.get("val"))
    print(report.table())
    if args.out:
        data.atomic_write(args.out, report.to_json() + "\n")
        RunManifest("eval", asdict(cfg), {"ckpt": args.ckpt, "data": args.data, "split": args.split},
                    {"report": args.out}, args.seed,
                    timings={"total_s": time.perf_counter() - t0}).write(_manifest_path(args.out))


def cmd_analogy(args):
    t0 = time.perf_counter()
    _, model = _load_model(args.ckpt)
    a = _first_record(args.a, "sequence A").frames
    b = _first_record(args.b, "sequence B").frames
    c_rec = _first_record(args.c, "sequence C")
    d = models.analogy_transfer(model.params, model.config, a, b, c_rec.frames, args.horizon)
    _emit(_records_text(f"{c_rec.id}-analogy", [d]), args.out)
    if args.out:
        RunManifest("analogy", {"horizon": args.horizon}, {"ckpt": args.ckpt, "a": args.a, "b": args.b, "c": args.c},
                    {"d": args.out}, 0, timings={"total_s": time.perf_counter() - t0}).write(_manifest_path(args.out))


def cmd_render(args):
    ds = data.load_dataset(_require(args.seq, "sequence file"))
    record = ds.records[0]
    if args.id is not None:
        match = [r for r in ds.records if r.id == args.id]
        if not match:
            raise CliError(f"{args.seq}: no record {args.id!r}")
        record = match[0]
    paths = render.render(record.frames, args.out, args.layout, record.labels.get("split"))
    print(f"wrote {len(paths)} file(s) to {args.out}")


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"usage: {message}")


def build_parser():
    p = _Parser(prog="mtvae", description="Motion transformation VAE toolkit.")
    p.add_argument("--version", action="version", version=f"mtvae {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic branching benchmark")
    g.add_argument("--spec", default="default", help="'default', a .json file or a key = value file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=sorted(VARIANT_FLAGS))
    t.add_argument("--context-free", action="store_true")
    t.add_argument("--steps", type=int)
    t.add_argument("--config")
    t.add_argument("--resume")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample futures for a context")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--context", required=True, help="sequence file; its first record is used")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--horizon", type=int)
    s.add_argument("--from", dest="source", choices=("prior", "posterior"), default="prior")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="strided evaluation")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--stride", type=int, default=16)
    e.add_argument("--samples-rmse", type=int, default=50)
    e.add_argument("--samples-smse", type=int, default=500)
    e.add_argument("--bandwidth", default="auto")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analogy", help="apply the A -> B transition to C")
    a.add_argument("--ckpt", required=True)
    for name in ("a", "b", "c"):
        a.add_argument(f"--{name}", required=True)
    a.add_argument("--horizon", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analogy)

    r = sub.add_parser("render", help="draw a sequence as SVG")
    r.add_argument("--seq", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--layout", choices=("strip", "frames"), default="strip")
    r.add_argument("--id")
    r.set_defaults(func=cmd_render)
    return p


def run_cli(argv=None):
    """Run one subcommand; returns the process exit status."""
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return 0
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else 0
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - reported as one line
        kind = "usage" if isinstance(exc, CliError) and str(exc).startswith("usage:") else type(exc).__name__
        message = str(exc).removeprefix("usage: ").replace("\n", " ")
        print(f"error: {kind}: {message}", file=sys.stderr)
        return 2 if kind == "usage" else 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()

"""
Training loop: Adam, linear KL annealing, seeded batching and checkpoints.

Checkpoint file layout::

    MTVAE-CHECKPOINT\\n
    <one line of JSON header>\\n
    <payload>

The header carries ``format_version``, both configs, the step, the RNG state,
the array index and a SHA-256 digest of the payload.  The payload is a
sequence of arrays, each stored as::

    u32 name length | name (utf-8) | u32 ndim | u64 dims... | float64 LE data
"""

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import models
from . import tensor as tn
from .data import BatchSampler, atomic_write

FORMAT_VERSION = 1
MAGIC = b"MTVAE-CHECKPOINT\n"
TRACE_COLUMNS = ("step", "total", "recon", "kl", "cycle", "motion", "kl_weight")


class CheckpointError(ValueError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 32
    total_steps: int = 2000
    kl_anneal_steps: int = -1  # -1 -> 20% of total_steps
    K: int = 8
    lambda_cycle: float = 5.0
    lambda_motion: float = 5.0
    keep: float = 1.0
    observed_range: tuple = (8, 12)
    seed: int = 0
    checkpoint_interval: int = 0
    clip_norm: float = 0.0
    recon_reduction: str = "sum"

    def __post_init__(self):
        object.__setattr__(self, "observed_range", tuple(self.observed_range))
        if self.learning_rate <= 0 or self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("learning_rate, batch_size must be positive and total_steps >= 0")
        if self.lambda_cycle < 0 or self.lambda_motion < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.keep <= 1.0:
            raise ValueError("keep must be in (0, 1]")

    @property
    def anneal_steps(self):
        return self.kl_anneal_steps if self.kl_anneal_steps >= 0 else int(0.2 * self.total_steps)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def full_scale_train_config(variant=models.MTVAE_ADD, **overrides):
    """Batch 256, lr 1e-4, K=8, lambda_cycle=5, lambda_motion 5 (add) or 20."""
    lam_m = 5.0 if variant == models.MTVAE_ADD else 20.0
    return TrainConfig(batch_size=256, learning_rate=1e-4, K=8, lambda_cycle=5.0, lambda_motion=lam_m,
                       observed_range=(10, 20), **overrides)


# values enumerated during the hyper-parameter search; shipped for sweeps, never run in tests
SWEEP_GRID = {"K": (0, 4, 8, 12, 16), "lambda_motion": (0, 1, 5, 10, 20), "lambda_cycle": (0, 1, 5, 10, 20)}


def kl_anneal_weight(step, anneal_steps):
    if anneal_steps <= 0:
        return 1.0
    return min(1.0, step / anneal_steps)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params, grads, state, cfg):
    """Bias-corrected Adam; returns new (params, state) without mutating the inputs."""
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"no gradient for parameters {sorted(missing)}")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    step_size = cfg.learning_rate * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        eps_hat = cfg.adam_epsilon * np.sqrt(1.0 - b2 ** t)
        new_p[k] = p - step_size * m / (np.sqrt(v) + eps_hat)
        new_m[k], new_v[k] = m, v
    return new_p, OptimizerState(new_m, new_v, t)


def clip_by_global_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


@dataclass
class Checkpoint:
    model_config: models.ModelConfig
    train_config: TrainConfig
    params: dict
    optimizer: OptimizerState
    rng_state: dict
    step: int
    format_version: int = FORMAT_VERSION

    def rng(self):
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g


@dataclass
class TraceRow:
    step: int
    total: float
    recon: float
    kl: float
    cycle: float
    motion: float
    kl_weight: float

    def as_tuple(self):
        return tuple(getattr(self, c) for c in TRACE_COLUMNS)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list = field(default_factory=list)


def loss_and_grads(params, model_config, S_A, S_B, rng, kl_weight, cfg):
    leaves = models.as_leaves(params)
    loss, terms = models.total_loss(leaves, model_config, S_A, S_B, rng, kl_weight=kl_weight,
                                    lambda_cycle=cfg.lambda_cycle, lambda_motion=cfg.lambda_motion,
                                    K=cfg.K, keep=cfg.keep, training=True,
                                    recon_reduction=cfg.recon_reduction)
    grads = dict(zip(leaves, tn.grad(loss, list(leaves.values()))))
    return terms, grads


def train(model_config, data, cfg, params=None, resume=None, trace_path=None, checkpoint_path=None,
          callback=None):
    """Optimize ``model_config`` on ``data`` for ``cfg.total_steps`` steps.

    ``resume`` continues a :class:`Checkpoint` (its params, optimizer and RNG
    state) up to ``cfg.total_steps``.  Returns a :class:`TrainResult`.
    """
    sampler = BatchSampler(data, cfg.observed_range, model_config.future)
    if resume is not None:
        params = {k: v.copy() for k, v in resume.params.items()}
        opt = OptimizerState({k: v.copy() for k, v in resume.optimizer.m.items()},
                             {k: v.copy() for k, v in resume.optimizer.v.items()}, resume.optimizer.step)
        rng = resume.rng()
        start = resume.step
    else:
        params = params if params is not None else models.init_params(model_config, seed=cfg.seed)
        models.validate_params(model_config, params)
        opt = OptimizerState.zeros_like(params)
        rng = np.random.default_rng(cfg.seed)
        start = 0
    trace = []
    if trace_path is not None:
        if start == 0 or not os.path.exists(trace_path):
            write_trace_header(trace_path)
        else:
            # rows logged after the checkpoint was taken are replayed, so drop them
            kept = [r for r in read_trace(trace_path) if r.step < start]
            write_trace_header(trace_path)
            append_trace(trace_path, kept)
    for step in range(start, cfg.total_steps):
        S_A, S_B = sampler.sample(rng, cfg.batch_size)
        w = kl_anneal_weight(step, cfg.anneal_steps)
        terms, grads = loss_and_grads(params, model_config, S_A, S_B, rng, w, cfg)
        if not np.isfinite(terms.total):
            raise FloatingPointError(f"non-finite loss at step {step}: {terms}")
        if cfg.clip_norm > 0:
            grads = clip_by_global_norm(grads, cfg.clip_norm)
        params, opt = adam_step(params, grads, opt, cfg)
        row = TraceRow(step, terms.total, terms.recon, terms.kl, terms.cycle, terms.motion, w)
        trace.append(row)
        if trace_path is not None:
            append_trace(trace_path, [row])
        if callback is not None:
            callback(row)
        done = step + 1
        if checkpoint_path is not None and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
            save_checkpoint(Checkpoint(model_config, cfg, params, opt, rng.bit_generator.state, done),
                            checkpoint_path)
    ck = Checkpoint(model_config, cfg, params, opt, rng.bit_generator.state, max(start, cfg.total_steps))
    if checkpoint_path is not None:
        save_checkpoint(ck, checkpoint_path)
    return TrainResult(ck, trace)


# ---------------------------------------------------------------------------
# loss trace


def write_trace_header(path, deterministic=True):
    atomic_write(path, f"# deterministic={'true' if deterministic else 'false'}\n" + ",".join(TRACE_COLUMNS) + "\n")


def append_trace(path, rows):
    with open(path, "a") as fh:
        for r in rows:
            fh.write(",".join([str(r.step)] + [repr(float(x)) for x in r.as_tuple()[1:]]) + "\n")


def read_trace(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("step"):
                continue
            parts = line.strip().split(",")
            rows.append(TraceRow(int(parts[0]), *map(float, parts[1:])))
    return rows


# ---------------------------------------------------------------------------
# checkpoints


def _pack_arrays(arrays):
    chunks = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def _unpack_arrays(payload):
    out, pos = {}, 0
    while pos < len(payload):
        (n,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        name = payload[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", payload, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return out


def checkpoint_bytes(ck):
    arrays = [(f"param/{k}", v) for k, v in sorted(ck.params.items())]
    arrays += [(f"adam.m/{k}", v) for k, v in sorted(ck.optimizer.m.items())]
    arrays += [(f"adam.v/{k}", v) for k, v in sorted(ck.optimizer.v.items())]
    payload = _pack_arrays(arrays)
    header = {
        "format_version": ck.format_version,
        "model_config": ck.model_config.to_dict(),
        "train_config": ck.train_config.to_dict(),
        "step": ck.step,
        "optimizer_step": ck.optimizer.step,
        "rng_state": ck.rng_state,
        "arrays": [[name, list(np.shape(a))] for name, a in arrays],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    return MAGIC + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload


def save_checkpoint(ck, path):
    atomic_write(path, checkpoint_bytes(ck), mode="wb")


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return checkpoint_from_bytes(blob, str(path))


def checkpoint_from_bytes(blob, source="<bytes>"):
    if not blob.startswith(MAGIC):
        raise IntegrityError(f"{source}: not a checkpoint file (bad magic)")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise IntegrityError(f"{source}: truncated header")
    try:
        header = json.loads(blob[len(MAGIC):end].decode("utf-8"))
        version = header["format_version"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{source}: corrupted header ({exc})") from None
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{source}: checkpoint format_version {version} is not supported "
                                 f"(this build reads version {FORMAT_VERSION})")
    payload = blob[end + 1:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise IntegrityError(f"{source}: payload digest mismatch")
    try:
        arrays = _unpack_arrays(payload)
        model_config = models.ModelConfig.from_dict(header["model_config"])
        train_config = TrainConfig.from_dict(header["train_config"])
    except (ValueError, KeyError, TypeError, struct.error) as exc:
        raise IntegrityError(f"{source}: corrupted payload ({exc})") from None
    for name, shape in header["arrays"]:
        if name not in arrays or list(arrays[name].shape) != shape:
            raise IntegrityError(f"{source}: array {name!r} missing or mis-shaped")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    m = {k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")}
    v = {k[len("adam.v/"):]: a for k, a in arrays.items() if k.startswith("adam.v/")}
    models.validate_params(model_config, params)
    return Checkpoint(model_config, train_config, params, OptimizerState(m, v, header["optimizer_step"]),
                      header["rng_state"], header["step"], version)


def with_steps(cfg, total_steps):
    return replace(cfg, total_steps=total_steps)

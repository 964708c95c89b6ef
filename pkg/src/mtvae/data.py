"""
Motion sequence datasets: a synthetic branching benchmark, file I/O,
min-max normalization and (context, future) windowing.

Synthetic benchmark
-------------------
Each joint ``j`` circles its base point ``b_j`` with radius ``amplitude``::

    observed  p_j(t) = b_j + a [cos(w0 t + phi_j), sin(w0 t + phi_j)]       t < split
    future    p_j(k) = b_j + a_k [cos(theta_j + r w_m k), sin(theta_j + r w_m k)] + k s R(alpha) d_m
              a_k    = a (1 + (rho - 1) k / T_fut)

where ``theta_j`` is the angle at the last observed frame, ``k = 1..T_fut``
and mode ``m`` is drawn uniformly.  Four style factors shared by all joints,
tempo ``r``, drift scale ``s``, drift turn ``alpha`` and end radius ``rho``,
are drawn per record and stored as ``labels["style"]``.  They are invisible
in the observed frames, so a generator that only knows the context must
guess them.  Every frame gets i.i.d. Gaussian noise truncated
at four standard deviations, so the bound check is exact.
"""

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class MotionRecord:
    id: str
    frames: np.ndarray
    labels: dict = field(default_factory=dict)

    @property
    def length(self):
        return self.frames.shape[0]


@dataclass
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        flat = np.flatnonzero(self.maximum <= self.minimum)
        if flat.size:
            raise DatasetError(f"degenerate (constant) dimensions {flat.tolist()}: max must exceed min")

    @classmethod
    def from_dataset(cls, ds):
        stacked = np.concatenate([r.frames for r in ds.records], axis=0)
        return cls(stacked.min(axis=0), stacked.max(axis=0))

    def to_dict(self):
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["min"], d["max"])


@dataclass
class SequenceDataset:
    records: list
    dim: int
    split: str = "train"
    stats: NormalizationStats = None

    def __post_init__(self):
        for r in self.records:
            if r.frames.ndim != 2 or r.frames.shape[1] != self.dim:
                raise DatasetError(f"record {r.id!r} has frame width {r.frames.shape[-1]}, dataset D={self.dim}")

    def __len__(self):
        return len(self.records)

    @property
    def labels(self):
        return [r.labels.get("mode") for r in self.records]


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class SyntheticSpec:
    modes: int = 3
    joints: int = 4
    base_frequency: float = 0.3
    frequencies: tuple = (0.15, 0.3, 0.45)
    drift_speed: float = 0.02
    drift_angles: tuple = ()  # empty -> evenly spaced, starting straight up
    amplitude: float = 0.2
    base_spread: float = 0.2
    tempo_jitter: float = 0.25  # r in 1 +- tempo_jitter
    drift_jitter: float = 0.5  # s in 1 +- drift_jitter
    turn_jitter: float = 0.35  # alpha in +- turn_jitter radians
    radius_jitter: float = 0.3  # rho in 1 +- radius_jitter
    noise: float = 0.01
    observed_range: tuple = (8, 12)
    future: int = 16
    n_train: int = 600
    n_val: int = 60
    n_test: int = 60
    seed: int = 0

    def __post_init__(self):
        if self.modes < 1:
            raise DatasetError("need at least one mode")
        self.frequencies = tuple(self.frequencies)
        self.drift_angles = tuple(self.drift_angles)
        self.observed_range = tuple(self.observed_range)
        if len(self.frequencies) != self.modes:
            if len(self.frequencies) == 0:
                self.frequencies = (self.base_frequency,) * self.modes
            else:
                raise DatasetError(f"{len(self.frequencies)} frequencies for {self.modes} modes")
        if self.drift_angles and len(self.drift_angles) != self.modes:
            raise DatasetError(f"{len(self.drift_angles)} drift angles for {self.modes} modes")

    @property
    def dim(self):
        return 2 * self.joints

    @property
    def length(self):
        return self.observed_range[1] + self.future

    def bases(self):
        if self.joints == 1:
            return np.zeros((1, 2))
        xs = np.linspace(-self.base_spread, self.base_spread, self.joints)
        return np.stack([xs, np.zeros(self.joints)], axis=1)

    def drifts(self):
        angles = self.drift_angles or tuple(math.pi / 2 + 2 * math.pi * m / self.modes for m in range(self.modes))
        return self.drift_speed * np.array([[math.cos(a), math.sin(a)] for a in angles])

    def bound(self):
        """Largest absolute coordinate any frame can take."""
        reach = self.amplitude * (1 + self.radius_jitter) + self.future * self.drift_speed * (1 + self.drift_jitter) + 4 * self.noise
        return float(np.max(np.abs(self.bases())) + reach)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


NOMINAL_STYLE = (1.0, 1.0, 0.0, 1.0)


def draw_style(spec, rng):
    u = rng.uniform(-1, 1, 4)
    return np.array([1 + spec.tempo_jitter * u[0], 1 + spec.drift_jitter * u[1],
                     spec.turn_jitter * u[2], 1 + spec.radius_jitter * u[3]])


def continuation_from_angles(spec, last_angles, mode, steps=None, style=None):
    """Noise-free future frames (steps, D) given each joint's angle at the last observed frame.

    ``style`` is the record's ``[r, s, alpha, rho]``; ``None`` means nominal.
    """
    steps = steps or spec.future
    r, s, alpha, rho = NOMINAL_STYLE if style is None else style
    k = np.arange(1, steps + 1)[:, None]
    theta = np.asarray(last_angles)[None, :] + spec.frequencies[mode] * r * k
    radius = spec.amplitude * (1 + (rho - 1) * k / spec.future)
    dx, dy = spec.drifts()[mode]
    ca, sa = math.cos(alpha), math.sin(alpha)
    drift = s * np.array([ca * dx - sa * dy, sa * dx + ca * dy])
    bases = spec.bases()
    x = bases[None, :, 0] + radius * np.cos(theta) + k * drift[0]
    y = bases[None, :, 1] + radius * np.sin(theta) + k * drift[1]
    return np.stack([x, y], axis=-1).reshape(steps, spec.dim)


def estimate_last_angles(spec, context):
    """Per-joint angle at the last context frame, by a circular mean over the context."""
    context = np.asarray(context).reshape(len(context), spec.joints, 2)
    rel = context - spec.bases()[None]
    angles = np.arctan2(rel[..., 1], rel[..., 0])
    lag = spec.base_frequency * np.arange(len(context) - 1, -1, -1)[:, None]
    shifted = angles + lag
    return np.arctan2(np.sin(shifted).sum(axis=0), np.cos(shifted).sum(axis=0))


def continuation(spec, context, mode, steps=None, style=None):
    """Noise-free continuation of ``context`` under ``mode`` (nominal style by default)."""
    return continuation_from_angles(spec, estimate_last_angles(spec, context), mode, steps, style)


def _clean_sequence(spec, phases, mode, style):
    split = spec.observed_range[1]
    t = np.arange(split)[:, None]
    theta = spec.base_frequency * t + phases[None, :]
    bases = spec.bases()
    obs = np.stack([bases[None, :, 0] + spec.amplitude * np.cos(theta),
                    bases[None, :, 1] + spec.amplitude * np.sin(theta)], axis=-1).reshape(split, spec.dim)
    last = spec.base_frequency * (split - 1) + phases
    return np.concatenate([obs, continuation_from_angles(spec, last, mode, style=style)], axis=0)


def gen_synthetic(spec=None, clean=False):
    """Train/val/test splits of the branching benchmark; a pure function of ``spec``.

    Each record is ``observed_range[1] + future`` frames long, with the mode
    switch at frame ``observed_range[1]`` stored as ``labels["split"]``.
    ``clean=True`` omits the observation noise.
    """
    spec = spec or SyntheticSpec()
    if spec.bound() > 1.0:
        raise DatasetError(f"spec can reach |x| = {spec.bound():.3f} > 1; shrink amplitude, drift or spread")
    rng = np.random.default_rng(spec.seed)
    split = spec.observed_range[1]
    out = {}
    for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        records = []
        for i in range(n):
            phases = rng.uniform(0, 2 * math.pi, spec.joints)
            mode = int(rng.integers(spec.modes))
            style = draw_style(spec, rng)
            noise = np.clip(rng.standard_normal((spec.length, spec.dim)), -4, 4) * spec.noise
            frames = _clean_sequence(spec, phases, mode, style)
            if not clean:
                frames = frames + noise
            labels = {"mode": mode, "split": split, "style": style.tolist()}
            records.append(MotionRecord(f"{name}-{i:05d}", frames, labels))
        out[name] = SequenceDataset(records, spec.dim, name)
    return out


def mode_classify(context, generated_future, spec):
    """(mode, mse) of the closest noise-free continuation; ties go to the lowest mode."""
    generated_future = np.asarray(generated_future)
    angles = estimate_last_angles(spec, context)
    errors = [float(np.mean((generated_future - continuation_from_angles(spec, angles, m, len(generated_future))) ** 2))
              for m in range(spec.modes)]
    best = int(np.argmin(errors))
    return best, errors[best]


# ---------------------------------------------------------------------------
# normalization


def normalize(ds, stats):
    """Per-dimension affine map min -> -1, max -> +1 (no clipping)."""
    scale = 2.0 / (stats.maximum - stats.minimum)
    recs = [MotionRecord(r.id, (r.frames - stats.minimum) * scale - 1.0, dict(r.labels)) for r in ds.records]
    return SequenceDataset(recs, ds.dim, ds.split, stats)


def denormalize(ds, stats):
    recs = [MotionRecord(r.id, denormalize_frames(r.frames, stats), dict(r.labels)) for r in ds.records]
    return SequenceDataset(recs, ds.dim, ds.split, None)


def denormalize_frames(frames, stats):
    return (np.asarray(frames) + 1.0) * 0.5 * (stats.maximum - stats.minimum) + stats.minimum


# ---------------------------------------------------------------------------
# windows


@dataclass
class WindowSet:
    contexts: list
    futures: list
    record_ids: list
    skipped: int = 0

    def __len__(self):
        return len(self.contexts)

    def pairs(self):
        return list(zip(self.contexts, self.futures))


def _window_starts(record, observed, future, stride):
    split = record.labels.get("split")
    if split is not None:
        start = split - observed
        return [start] if start >= 0 and split + future <= record.length else []
    return list(range(0, record.length - observed - future + 1, stride))


def sample_windows(ds, observed_range, future, mode="stride", stride=16, count=None, rng=None):
    """(S_A, S_B) pairs from ``ds``.

    ``mode="stride"``: deterministic windows of ``observed_range[0]`` context
    frames every ``stride`` frames.  ``mode="random"``: ``count`` windows with
    a context length drawn uniformly from ``observed_range``.  Records that
    carry a ``split`` label are anchored so the context ends at the split.
    """
    lo, hi = observed_range
    if mode == "stride":
        out = WindowSet([], [], [])
        for r in ds.records:
            starts = _window_starts(r, lo, future, stride)
            if not starts:
                out.skipped += 1
            for s in starts:
                out.contexts.append(r.frames[s:s + lo])
                out.futures.append(r.frames[s + lo:s + lo + future])
                out.record_ids.append(r.id)
    elif mode == "random":
        if rng is None or count is None:
            raise ValueError("random windows need rng and count")
        out = WindowSet([], [], [])
        while len(out) < count:
            L = int(rng.integers(lo, hi + 1))
            r = ds.records[int(rng.integers(len(ds.records)))]
            starts = _window_starts(r, L, future, 1)
            if not starts:
                out.skipped += 1
                if out.skipped > 100 * count:
                    break
                continue
            s = starts[int(rng.integers(len(starts)))]
            out.contexts.append(r.frames[s:s + L])
            out.futures.append(r.frames[s + L:s + L + future])
            out.record_ids.append(r.id)
    else:
        raise ValueError(f"unknown window mode {mode!r}")
    if len(out) == 0:
        raise DatasetError(f"no window of {lo}+{future} frames fits any of the {len(ds)} sequences")
    return out


class BatchSampler:
    """Random training batches with one context length per batch."""

    def __init__(self, ds, observed_range, future):
        self.observed_range = tuple(observed_range)
        self.future = future
        lo, hi = self.observed_range
        self.records = []
        for r in ds.records:
            if _window_starts(r, hi, future, 1) or _window_starts(r, lo, future, 1):
                self.records.append(r)
        if not self.records:
            raise DatasetError(f"no sequence in the dataset fits {lo}+{future} frames")

    def sample(self, rng, batch_size):
        lo, hi = self.observed_range
        L = int(rng.integers(lo, hi + 1))
        S_A = np.empty((batch_size, L, self.records[0].frames.shape[1]))
        S_B = np.empty((batch_size, self.future, S_A.shape[2]))
        for b in range(batch_size):
            while True:
                r = self.records[int(rng.integers(len(self.records)))]
                starts = _window_starts(r, L, self.future, 1)
                if starts:
                    break
            s = starts[int(rng.integers(len(starts)))]
            S_A[b] = r.frames[s:s + L]
            S_B[b] = r.frames[s + L:s + L + self.future]
        return S_A, S_B


# ---------------------------------------------------------------------------
# files


def atomic_write(path, data, mode="w"):
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _record_line(record):
    obj = {"id": record.id, "d": int(record.frames.shape[1]), "frames": record.frames.tolist()}
    obj.update(record.labels)
    return json.dumps(obj)


def dumps_dataset(ds):
    return "".join(_record_line(r) + "\n" for r in ds.records)


def save_dataset(ds, path):
    atomic_write(path, dumps_dataset(ds))


def load_dataset(path, split=None):
    """Read a sequence file (one JSON record per line)."""
    records, dim = [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid, d, frames = str(obj.pop("id")), int(obj.pop("d")), obj.pop("frames")
                frames = np.asarray(frames, dtype=np.float64)
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from None
            if frames.ndim != 2 or frames.shape[0] < 1:
                raise DatasetError(f"{path}:{lineno}: record {rid!r} frames must be a non-empty T x d array")
            if frames.shape[1] != d:
                raise DatasetError(f"{path}:{lineno}: record {rid!r} has frames of width {frames.shape[1]} "
                                   f"but declares d={d}")
            if dim is None:
                dim = d
            elif d != dim:
                raise DatasetError(f"{path}:{lineno}: record {rid!r} has d={d}, earlier records have d={dim}")
            records.append(MotionRecord(rid, frames, obj))
    if dim is None:
        raise DatasetError(f"{path}: no records")
    return SequenceDataset(records, dim, split or "train")


def save_manifest(path, splits, stats=None, spec=None):
    """Split membership plus normalization stats (and the synthetic spec, if any)."""
    manifest = {
        "splits": {name: {"file": f"{name}.jsonl", "ids": [r.id for r in ds.records]} for name, ds in splits.items()},
        "normalization": stats.to_dict() if stats is not None else None,
        "synthetic_spec": spec.to_dict() if spec is not None else None,
    }
    atomic_write(path, json.dumps(manifest, indent=2))


def save_splits(directory, splits, stats=None, spec=None):
    for name, ds in splits.items():
        save_dataset(ds, os.path.join(directory, f"{name}.jsonl"))
    save_manifest(os.path.join(directory, "manifest.json"), splits, stats, spec)


def load_splits(directory):
    """Load every split listed in ``directory/manifest.json``; returns (splits, manifest)."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    stats = NormalizationStats.from_dict(manifest["normalization"]) if manifest.get("normalization") else None
    splits = {}
    for name, entry in manifest["splits"].items():
        ds = load_dataset(os.path.join(directory, entry["file"]), split=name)
        ds.stats = stats
        splits[name] = ds
    return splits, manifest

"""
Best-of-N squared errors, Parzen-window log-likelihood, mode coverage and
the strided evaluation protocol.

Squared errors are totals over all T*D entries of a window, not means.
R-MSE draws z from the recognition model q(z | S_A, S_B); S-MSE and the
Parzen estimate draw z from the N(0, I) prior.  PredictionLSTM has no
recognition model, so its R-MSE is reported as ``None``; its S-MSE is the
error of its single deterministic prediction.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import models
from .data import continuation, mode_classify, sample_windows

NOT_APPLICABLE = None


@dataclass(frozen=True)
class EvalConfig:
    samples_rmse: int = 50
    samples_smse: int = 500
    stride: int = 16
    bandwidth: float = 0.0  # 0 -> select on the validation split
    bandwidth_grid: tuple = tuple(np.logspace(-3, 1, 20).tolist())
    coverage_samples: int = 100
    observed: int = 0  # 0 -> the model's shortest observed length
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bandwidth_grid", tuple(self.bandwidth_grid))
        if self.samples_rmse < 1 or self.samples_smse < 1:
            raise ValueError("sample counts must be >= 1")
        if not self.bandwidth_grid or min(self.bandwidth_grid) <= 0:
            raise ValueError("bandwidth grid must be non-empty and strictly positive")


@dataclass
class Model:
    """A trained configuration bundled with its parameters."""

    config: models.ModelConfig
    params: dict


def _prepare(S_A, S_B):
    return np.asarray(S_A, dtype=np.float64), np.asarray(S_B, dtype=np.float64)


def posterior_samples(model, S_A, S_B, n, rng):
    """n futures decoded from z ~ q(z | S_A, S_B); shape (n, T, D)."""
    S_A, S_B = _prepare(S_A, S_B)
    q = models.posterior(model.params, model.config, S_A, S_B)
    eps = rng.standard_normal((n, model.config.latent))
    z = q.mu + np.exp(0.5 * q.log_var) * eps
    return models.predict_future(model.params, model.config, S_A, z, S_B.shape[0])


def prior_samples(model, S_A, n, T_fut, rng):
    """n futures decoded from z ~ N(0, I); PredictionLSTM yields one."""
    if not model.config.is_vae:
        return models.predict_future(model.params, model.config, S_A, None, T_fut)[None]
    z = rng.standard_normal((n, model.config.latent))
    out = models.predict_future(model.params, model.config, S_A, z, T_fut)
    return out.reshape(n, T_fut, -1)


def squared_errors(samples, target):
    samples = np.asarray(samples).reshape(-1, *np.shape(target))
    return np.sum((samples - target) ** 2, axis=(1, 2))


def r_mse(model, S_A, S_B, n_samples, rng, return_samples=False):
    """min_k ||S_B - S*_B(z_k)||^2 with z_k from the recognition model."""
    if not model.config.is_vae:
        return (NOT_APPLICABLE, None) if return_samples else NOT_APPLICABLE
    S_A, S_B = _prepare(S_A, S_B)
    samples = posterior_samples(model, S_A, S_B, n_samples, rng)
    value = float(np.min(squared_errors(samples, S_B)))
    return (value, samples) if return_samples else value


def s_mse(model, S_A, S_B, n_samples, rng, return_samples=False):
    """min_k ||S_B - S*_B(z_k)||^2 with z_k from the prior."""
    S_A, S_B = _prepare(S_A, S_B)
    samples = prior_samples(model, S_A, n_samples, S_B.shape[0], rng)
    value = float(np.min(squared_errors(samples, S_B)))
    return (value, samples) if return_samples else value


def parzen_log_likelihood(samples, target, bandwidth):
    """log (1/N) sum_k N(target; sample_k, h^2 I) over flattened sequences."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    target = np.ravel(target)
    samples = np.reshape(samples, (-1, target.size))
    n = target.size
    sq = np.sum((samples - target) ** 2, axis=1)
    log_kernels = -0.5 * sq / bandwidth ** 2 - 0.5 * n * math.log(2 * math.pi * bandwidth ** 2)
    return float(logsumexp(log_kernels) - math.log(len(samples)))


def parzen_cll(model, S_A, S_B, n_samples, bandwidth, rng, return_samples=False):
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    S_A, S_B = _prepare(S_A, S_B)
    samples = prior_samples(model, S_A, n_samples, S_B.shape[0], rng)
    value = parzen_log_likelihood(samples, S_B, bandwidth)
    return (value, samples) if return_samples else value


def select_bandwidth(model, windows, grid, n_samples, rng, return_table=False):
    """Grid bandwidth maximizing mean Parzen CLL over ``windows``; ties -> smaller."""
    grid = sorted(float(h) for h in grid)
    if not grid:
        raise ValueError("empty bandwidth grid")
    totals = np.zeros(len(grid))
    pairs = list(windows)
    for S_A, S_B in pairs:
        samples = prior_samples(model, S_A, n_samples, np.shape(S_B)[0], rng)
        totals += [parzen_log_likelihood(samples, S_B, h) for h in grid]
    means = totals / len(pairs)
    best = int(np.flatnonzero(means == means.max())[0])
    table = list(zip(grid, means.tolist()))
    return (grid[best], table) if return_table else grid[best]


def mode_coverage(model, dataset, n_samples, spec, rng, observed=None):
    """Fraction of the M synthetic modes hit by n prior samples, per context.

    Returns (per-context fractions, their mean).
    """
    observed = observed or model.config.observed_range[0]
    windows = sample_windows(dataset, (observed, observed), model.config.future, mode="stride")
    fractions = []
    for S_A in windows.contexts:
        samples = prior_samples(model, S_A, n_samples, model.config.future, rng)
        hit = {mode_classify(S_A, s, spec)[0] for s in samples}
        fractions.append(len(hit) / spec.modes)
    fractions = np.array(fractions)
    return fractions, float(fractions.mean())


# ---------------------------------------------------------------------------
# reports


def mean_and_stderr(values):
    values = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if values.size == 0:
        return None, None
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return float(values.mean()), se


METRICS = ("r_mse", "s_mse", "cll", "coverage")


@dataclass
class EvalReport:
    variant: str
    split: str
    per_window: dict
    window_ids: list
    bandwidth: float
    config: dict
    aggregates: dict = field(default_factory=dict)
    note: str = "mean +- standard error over evaluation windows"

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self.recompute()

    def recompute(self):
        out = {}
        for name, values in self.per_window.items():
            m, se = mean_and_stderr(values)
            out[name] = {"mean": m, "stderr": se, "count": sum(v is not None for v in values)}
        return out

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def table(self):
        lines = [f"# {self.variant} on {self.split} ({len(self.window_ids)} windows, "
                 f"bandwidth {self.bandwidth:.4g}; {self.note})",
                 f"{'metric':<10}{'mean':>14}{'stderr':>14}{'n':>6}"]
        for name in METRICS:
            agg = self.aggregates.get(name)
            if agg is None:
                continue
            if agg["mean"] is None:
                lines.append(f"{name:<10}{'---':>14}{'---':>14}{0:>6}")
            else:
                lines.append(f"{name:<10}{agg['mean']:>14.6g}{agg['stderr']:>14.4g}{agg['count']:>6}")
        return "\n".join(lines)


def window_rng(seed, index):
    return np.random.default_rng([seed, index])


def evaluate(model, dataset, cfg=None, bandwidth=None, spec=None, validation=None):
    """Strided evaluation of ``model`` on ``dataset``.

    The Parzen bandwidth is ``bandwidth`` if given, else ``cfg.bandwidth`` if
    positive, else the grid value selected on ``validation`` (falling back to
    ``dataset``).  Mode coverage is added when a synthetic ``spec`` is given.
    Window ``i`` draws from its own stream seeded by ``(cfg.seed, i)``.
    """
    cfg = cfg or EvalConfig()
    observed = cfg.observed or model.config.observed_range[0]
    windows = sample_windows(dataset, (observed, observed), model.config.future, mode="stride", stride=cfg.stride)
    if bandwidth is None:
        bandwidth = cfg.bandwidth
    if not bandwidth or bandwidth <= 0:
        val = validation if validation is not None else dataset
        val_windows = sample_windows(val, (observed, observed), model.config.future, mode="stride", stride=cfg.stride)
        bandwidth = select_bandwidth(model, val_windows.pairs(), cfg.bandwidth_grid, cfg.samples_smse,
                                     np.random.default_rng([cfg.seed, 1 << 30]))
    per = {"r_mse": [], "s_mse": [], "cll": []}
    if spec is not None:
        per["coverage"] = []
    for i, (S_A, S_B) in enumerate(windows.pairs()):
        rng = window_rng(cfg.seed, i)
        per["r_mse"].append(r_mse(model, S_A, S_B, cfg.samples_rmse, rng))
        samples = prior_samples(model, S_A, cfg.samples_smse, S_B.shape[0], rng)
        per["s_mse"].append(float(np.min(squared_errors(samples, S_B))))
        per["cll"].append(parzen_log_likelihood(samples, S_B, bandwidth))
        if spec is not None:
            cov = prior_samples(model, S_A, cfg.coverage_samples, S_B.shape[0], rng)
            per["coverage"].append(len({mode_classify(S_A, s, spec)[0] for s in cov}) / spec.modes)
    return EvalReport(model.config.variant, dataset.split, per, list(windows.record_ids), float(bandwidth),
                      asdict(cfg))


def table1_row(name, train_report, test_report):
    """One line in the layout R-MSE train/test | S-MSE train/test | CLL."""
    def cell(report, metric):
        agg = report.aggregates[metric]
        return "---" if agg["mean"] is None else f"{agg['mean']:.4g} +- {agg['stderr']:.2g}"

    return {"method": name,
            "r_mse_train": cell(train_report, "r_mse"), "r_mse_test": cell(test_report, "r_mse"),
            "s_mse_train": cell(train_report, "s_mse"), "s_mse_test": cell(test_report, "s_mse"),
            "test_cll": cell(test_report, "cll")}


def format_rows(rows, columns=None):
    """Aligned plain-text table from a list of dicts."""
    if not rows:
        return ""
    columns = columns or list(rows[0])
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in columns]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(str(r[c]).ljust(w) for c, w in zip(columns, widths)) for r in rows)
    return "\n".join(lines)


def ablation_table(reports):
    """Rows of test R-MSE / S-MSE / CLL for named reports (name -> EvalReport)."""
    rows = []
    for name, rep in reports.items():
        row = {"model": name}
        for metric in ("r_mse", "s_mse", "cll"):
            agg = rep.aggregates[metric]
            row[metric] = "---" if agg["mean"] is None else f"{agg['mean']:.4g} +- {agg['stderr']:.2g}"
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# analogy suite


@dataclass
class AnalogyResult:
    errors: np.ndarray
    mode_agreement: float
    tolerance: float
    cases: list

    @property
    def pass_rate(self):
        return float(np.mean(self.errors <= self.tolerance))


def mean_velocity(context, future):
    """Average per-frame displacement across ``future``, starting from the last context frame."""
    return (np.asarray(future)[-1] - np.asarray(context)[-1]) / len(future)


def analogy_suite(model, dataset, spec, n_cases=50, seed=0, tolerance=0.1):
    """A : B :: C : D on synthetic records with known transitions.

    A and B are the context and future of one record (mode m, style s); C is
    the context of a different record.  The reference for D is C continued
    noise-free under (m, s), and a case passes when the mean velocities of D
    and the reference differ by at most ``tolerance`` (Euclidean).
    """
    rng = np.random.default_rng(seed)
    errors, agree, cases = [], 0, []
    for _ in range(n_cases):
        ia, ic = rng.choice(len(dataset), size=2, replace=False)
        ra, rc = dataset.records[ia], dataset.records[ic]
        split = ra.labels["split"]
        A, B = ra.frames[:split], ra.frames[split:]
        C = rc.frames[:rc.labels["split"]]
        mode, style = ra.labels["mode"], ra.labels.get("style")
        D = models.analogy_transfer(model.params, model.config, A, B, C, len(B))
        ref = continuation(spec, C, mode, len(B), style)
        err = float(np.linalg.norm(mean_velocity(C, D) - mean_velocity(C, ref)))
        errors.append(err)
        agree += mode_classify(C, D, spec)[0] == mode
        cases.append((ra.id, rc.id, mode, err))
    return AnalogyResult(np.array(errors), agree / n_cases, tolerance, cases)

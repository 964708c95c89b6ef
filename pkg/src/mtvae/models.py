"""
Prediction LSTM, Vanilla VAE and the two motion-transformation VAEs.

A model is a :class:`ModelConfig` plus a flat parameter dict.  Every
differentiable function here accepts that dict with either plain arrays
(inference) or :func:`tensor.parameter` leaves (training), so gradients are
obtained by calling :func:`tensor.backward` on the returned loss.

Variant routing::

    PredictionLSTM   e_A ------------------------------------> g(e_A)
    VanillaVAE       z ~ q([e_A, e_B])           ------------> g([z, e_A])
    MTVAEConcat      z ~ q([e_A, e_B]);  e*_B = h([z, e_A])   -> g(e*_B)
    MTVAEAdd         z ~ q(e_B - e_A);   e*_B = e_A + h([z, e_A]) -> g(e*_B)
"""

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import seqnet
from . import tensor as tn

PREDICTION_LSTM = "PredictionLSTM"
VANILLA_VAE = "VanillaVAE"
MTVAE_CONCAT = "MTVAEConcat"
MTVAE_ADD = "MTVAEAdd"
VARIANTS = (PREDICTION_LSTM, VANILLA_VAE, MTVAE_CONCAT, MTVAE_ADD)

LOG_VAR_RANGE = (-10.0, 10.0)

FULL_SCALE_DEFAULTS = {"K": 8, "lambda_cycle": 5.0, "lambda_motion": {MTVAE_ADD: 5.0, "other": 20.0}}


class UnsupportedVariant(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = MTVAE_ADD
    dim: int = 4
    hidden: int = 64
    latent: int = 8
    latent_width: int = 0  # 0 -> max(latent, hidden)
    context_free: bool = False
    layer_norm: bool = True
    observed_range: tuple = (8, 12)
    future: int = 16
    teacher_forcing: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UnsupportedVariant(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.latent < 1:
            raise ValueError("latent dimension must be >= 1")
        if self.context_free and self.variant != MTVAE_ADD:
            raise ValueError("context_free only applies to MTVAEAdd")
        object.__setattr__(self, "observed_range", tuple(self.observed_range))

    @property
    def width(self):
        return self.latent_width or max(self.latent, self.hidden)

    @property
    def is_vae(self):
        return self.variant != PREDICTION_LSTM

    @property
    def has_latent_nets(self):
        return self.variant in (MTVAE_CONCAT, MTVAE_ADD)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def full_scale_config(variant, dim=64):
    """1024 hidden units and a 512-dim bottleneck, as used for full-size runs."""
    return ModelConfig(variant=variant, dim=dim, hidden=1024, latent=512,
                       observed_range=(10, 20), future=64)


@dataclass
class LatentGaussian:
    mu: object
    log_var: object


# ---------------------------------------------------------------------------
# parameters


def _latent_input_dims(config):
    H, Z = config.hidden, config.latent
    if config.variant == MTVAE_ADD:
        enc_in = H
        dec_in = Z if config.context_free else Z + H
    else:
        enc_in = 2 * H
        dec_in = Z + H
    return enc_in, dec_in


def _init_mlp(rng, prefix, in_dim, width, out_dim, layer_norm, zero_output):
    params = {}
    d = in_dim
    for k in range(2):
        params[f"{prefix}.l{k}.W"] = seqnet.uniform_init(rng, d, (d, width))
        params[f"{prefix}.l{k}.b"] = np.zeros(width)
        if layer_norm:
            params[f"{prefix}.l{k}.gain"] = np.ones(width)
        if d != width:
            params[f"{prefix}.l{k}.skip"] = seqnet.uniform_init(rng, d, (d, width))
        d = width
    if zero_output:
        params[f"{prefix}.out.W"] = np.zeros((width, out_dim))
    else:
        params[f"{prefix}.out.W"] = seqnet.uniform_init(rng, width, (width, out_dim))
    params[f"{prefix}.out.b"] = np.zeros(out_dim)
    return params


def init_params(config, seed=0):
    """Fresh parameters for ``config``; the name set depends only on the config."""
    rng = np.random.default_rng(seed)
    H, Z, D = config.hidden, config.latent, config.dim
    params = seqnet.init_encoder(rng, D, H, config.layer_norm)
    feature_dim = H + Z if config.variant == VANILLA_VAE else H
    params.update(seqnet.init_decoder(rng, D, H, feature_dim, config.layer_norm))
    if config.is_vae:
        enc_in, dec_in = _latent_input_dims(config)
        # zero head: training starts with q(z|.) equal to the prior
        params.update(_init_mlp(rng, "lenc", enc_in, config.width, 2 * Z, config.layer_norm, True))
        if config.has_latent_nets:
            params.update(_init_mlp(rng, "ldec", dec_in, config.width, H, config.layer_norm, False))
    return params


def param_shapes(config):
    return {k: v.shape for k, v in init_params(config).items()}


def validate_params(config, params):
    expected = param_shapes(config)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter names do not match config: missing={missing} extra={extra}")
    for k, shape in expected.items():
        if tuple(np.shape(params[k])) != tuple(shape):
            raise ValueError(f"parameter {k!r} has shape {np.shape(params[k])}, expected {shape}")


def as_leaves(params):
    return {k: tn.parameter(v, name=k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# latent networks


def _mlp(params, prefix, x):
    for k in range(2):
        W = params[f"{prefix}.l{k}.W"]
        pre = tn.matmul(x, W)
        gain = params.get(f"{prefix}.l{k}.gain")
        if gain is not None:
            pre = tn.layer_norm(pre, gain, params[f"{prefix}.l{k}.b"])
        else:
            pre = pre + params[f"{prefix}.l{k}.b"]
        skip_w = params.get(f"{prefix}.l{k}.skip")
        skip = tn.matmul(x, skip_w) if skip_w is not None else x
        x = tn.tanh(pre) + skip
    return tn.matmul(x, params[f"{prefix}.out.W"]) + params[f"{prefix}.out.b"]


def latent_encode(params, config, e_A, e_B):
    """Recognition model q(z | S_A, S_B) from the two motion features."""
    if not config.is_vae:
        raise UnsupportedVariant(f"latent_encode is undefined for {config.variant}")
    if config.variant == MTVAE_ADD:
        x = tn.sub(e_B, e_A)
    else:
        x = tn.concat([e_A, e_B])
    out = _mlp(params, "lenc", x)
    Z = config.latent
    mu = tn.slice_last(out, 0, Z)
    log_var = tn.clip(tn.slice_last(out, Z, 2 * Z), *LOG_VAR_RANGE)
    return LatentGaussian(mu, log_var)


def latent_decode(params, config, z, e_A):
    """Synthesize the future motion feature e*_B from ``z`` and ``e_A``."""
    if config.variant == MTVAE_CONCAT:
        return _mlp(params, "ldec", tn.concat([z, e_A]))
    if config.variant == MTVAE_ADD:
        x = tn._wrap(z) if config.context_free else tn.concat([z, e_A])
        return tn.add(e_A, _mlp(params, "ldec", x))
    raise UnsupportedVariant(f"latent_decode is undefined for {config.variant}")


def decoder_feature(params, config, z, e_A):
    """Whatever the sequence decoder consumes for this variant."""
    if config.variant == PREDICTION_LSTM:
        return tn._wrap(e_A)
    if config.variant == VANILLA_VAE:
        return tn.concat([z, e_A])
    return latent_decode(params, config, z, e_A)


def reparameterize(g, rng, eps=None):
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I) drawn from ``rng``."""
    mu = tn._wrap(g.mu)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    return mu + tn.exp(tn.mul(g.log_var, 0.5)) * eps


def kl_divergence(g):
    """KL(N(mu, exp(log_var)) || N(0, I)) summed over the last axis."""
    mu, lv = tn._wrap(g.mu), tn._wrap(g.log_var)
    # expm1(lv) - lv >= 0 survives rounding, unlike exp(lv) - 1 - lv
    terms = (tn.expm1(lv) - lv) + tn.square(mu)
    return tn.mul(tn.sum(terms, axis=-1), 0.5)


# ---------------------------------------------------------------------------
# losses


def reconstruction_loss(predicted, target):
    """Mean absolute error over every entry."""
    predicted = tn._wrap(predicted)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise tn.ShapeError(f"reconstruction_loss: shapes {predicted.shape} and {target.shape} differ")
    return tn.mean(tn.absolute(predicted - target))


def velocities(frames, last_observed, K):
    """[y_1 - x_T, y_2 - y_1, ...] for the first K frames of a (batch, T, D) sequence."""
    frames = tn._wrap(frames)
    last = tn._wrap(np.asarray(last_observed, dtype=np.float64) if not isinstance(last_observed, tn.Tensor)
                    else last_observed)
    if last.value.ndim == frames.value.ndim - 1:
        last = tn.reshape(last, last.shape[:-1] + (1, last.shape[-1]))
    head = tn.index(frames, (Ellipsis, slice(0, K), slice(None)))
    prev = tn.concat([last, tn.index(frames, (Ellipsis, slice(0, K - 1), slice(None)))], axis=-2) if K > 1 else last
    return head - prev


def motion_coherence_loss(generated, target, last_observed, K):
    """(1/K) * sum_t ||v*_t - v_t|| over the first K steps, averaged over the batch."""
    if K == 0:
        return tn.constant(0.0)
    generated = tn._wrap(generated)
    target = tn._wrap(np.asarray(target, dtype=np.float64))
    if generated.shape != target.shape:
        raise tn.ShapeError(f"motion_coherence_loss: shapes {generated.shape} and {target.shape} differ")
    T = generated.shape[-2]
    if K > T:
        raise ValueError(f"window K={K} exceeds sequence length {T}")
    diff = velocities(generated, last_observed, K) - velocities(target, last_observed, K)
    per_step = tn.norm(diff)
    return tn.mean(per_step)


def cycle_loss(params, config, e_A, rng, z=None):
    """||z* - z|| with z from the prior and z* the mean of the re-encoded Gaussian."""
    if not config.has_latent_nets:
        raise UnsupportedVariant(f"cycle_loss needs latent encoder/decoder nets; {config.variant} has none")
    e_A = tn._wrap(e_A)
    if z is None:
        z = rng.standard_normal(e_A.shape[:-1] + (config.latent,))
    e_star = latent_decode(params, config, z, e_A)
    z_star = latent_encode(params, config, e_A, e_star).mu
    return tn.mean(tn.norm(z_star - z))


@dataclass
class LossTerms:
    total: float
    recon: float
    kl: float
    cycle: float
    motion: float
    kl_weight: float
    lambda_cycle: float
    lambda_motion: float

    def recombined(self):
        return (self.recon + self.kl_weight * self.kl + self.lambda_cycle * self.cycle
                + self.lambda_motion * self.motion)


def total_loss(params, config, S_A, S_B, rng, kl_weight=1.0, lambda_cycle=5.0, lambda_motion=5.0,
               K=8, keep=1.0, training=True, recon_reduction="sum"):
    """Training objective for one batch; returns (scalar tensor, LossTerms).

    S_A is (batch, T_obs, D), S_B is (batch, T_fut, D).  With
    ``recon_reduction="sum"`` the L1 term is summed over the T*D entries of
    each example (a Laplace log-likelihood, so the KL term is weighed against
    the whole sequence); ``"mean"`` uses the per-entry mean.
    """
    if recon_reduction not in ("sum", "mean"):
        raise ValueError(f"recon_reduction must be 'sum' or 'mean', got {recon_reduction!r}")
    if lambda_cycle < 0 or lambda_motion < 0:
        raise ValueError("loss weights must be non-negative")
    if not 0.0 <= kl_weight <= 1.0:
        raise ValueError(f"kl_weight must be in [0, 1], got {kl_weight}")
    S_A = np.asarray(S_A, dtype=np.float64)
    S_B = np.asarray(S_B, dtype=np.float64)
    if S_A.ndim == 2:
        S_A, S_B = S_A[None], S_B[None]
    B, T_fut = S_A.shape[0], S_B.shape[1]
    scale = T_fut * S_B.shape[2] if recon_reduction == "sum" else 1.0
    last = S_A[:, -1, :]
    targets = S_B if config.teacher_forcing else None
    e_A = seqnet.encode_sequence(params, S_A, keep, rng, training)
    zero = tn.constant(0.0)
    kl = cycle = motion = zero

    if config.variant == PREDICTION_LSTM:
        pred = seqnet.decode_sequence(params, e_A, last, T_fut, keep, rng, training, targets)
        recon = reconstruction_loss(pred, S_B) * scale
        total = recon
    else:
        e_B = seqnet.encode_sequence(params, S_B, keep, rng, training)
        q = latent_encode(params, config, e_A, e_B)
        z_post = reparameterize(q, rng)
        kl = tn.mean(kl_divergence(q))
        if config.variant == VANILLA_VAE:
            pred = seqnet.decode_sequence(params, decoder_feature(params, config, z_post, e_A), last, T_fut,
                                          keep, rng, training, targets)
            recon = reconstruction_loss(pred, S_B) * scale
            total = recon + kl * kl_weight
        else:
            # posterior and prior rollouts share one decoder pass over a 2B batch
            z_prior = rng.standard_normal((B, config.latent))
            f_post = latent_decode(params, config, z_post, e_A)
            f_prior = latent_decode(params, config, z_prior, e_A)
            both = seqnet.decode_sequence(params, tn.concat([f_post, f_prior], axis=0),
                                          np.concatenate([last, last]), T_fut, keep, rng, training,
                                          np.concatenate([S_B, S_B]) if targets is not None else None)
            pred = tn.index(both, slice(0, B))
            prior_pred = tn.index(both, slice(B, 2 * B))
            recon = reconstruction_loss(pred, S_B) * scale
            if K > 0 and lambda_motion > 0:
                motion = motion_coherence_loss(prior_pred, S_B, last, K)
            if lambda_cycle > 0:
                cycle = cycle_loss(params, config, e_A, rng)
            total = recon + kl * kl_weight + cycle * lambda_cycle + motion * lambda_motion
    terms = LossTerms(total.item(), recon.item(), kl.item(), cycle.item(), motion.item(),
                      kl_weight, lambda_cycle, lambda_motion)
    return total, terms


# ---------------------------------------------------------------------------
# generation


def encode(params, frames):
    return seqnet.encode_sequence(params, frames).value


def predict_future(params, config, S_A, z=None, T_fut=None):
    """Generate the future of ``S_A`` (T, D) or (batch, T, D).

    ``z`` may be (N_z,) or (batch, N_z); a batch of z with a single context
    generates one future per z.
    """
    T_fut = T_fut or config.future
    S_A = np.asarray(S_A, dtype=np.float64)
    single = S_A.ndim == 2
    if single:
        S_A = S_A[None]
    e_A = encode(params, S_A)
    last = S_A[:, -1, :]
    if config.variant == PREDICTION_LSTM:
        if z is not None:
            warnings.warn("z is ignored by PredictionLSTM", stacklevel=2)
        feature = e_A
    else:
        if z is None:
            raise ValueError(f"{config.variant} needs a latent code z")
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = z[None]
        if z.shape[0] != e_A.shape[0]:
            if e_A.shape[0] != 1:
                raise tn.ShapeError(f"predict_future: {z.shape[0]} codes for {e_A.shape[0]} contexts")
            e_A = np.repeat(e_A, z.shape[0], axis=0)
            last = np.repeat(last, z.shape[0], axis=0)
        feature = decoder_feature(params, config, z, e_A).value
    out = seqnet.decode_sequence(params, feature, last, T_fut).value
    return out[0] if single and out.shape[0] == 1 else out


def posterior(params, config, S_A, S_B):
    """Recognition Gaussian for a (context, future) pair, as plain arrays."""
    S_A = np.asarray(S_A, dtype=np.float64)
    S_B = np.asarray(S_B, dtype=np.float64)
    if S_A.ndim == 2:
        S_A, S_B = S_A[None], S_B[None]
    q = latent_encode(params, config, encode(params, S_A), encode(params, S_B))
    return LatentGaussian(q.mu.value, q.log_var.value)


def analogy_feature(params, config, A, B, C):
    """e*_D for the analogy A : B :: C : D, with sigma set to zero."""
    e_A, e_B, e_C = (encode(params, np.asarray(s, dtype=np.float64)) for s in (A, B, C))
    if config.variant == PREDICTION_LSTM:
        # grouped so that C == A gives e_B exactly
        return e_B + (e_C - e_A)
    q = latent_encode(params, config, e_A, e_B)
    return decoder_feature(params, config, q.mu.value, e_C).value


def analogy_transfer(params, config, A, B, C, T_fut=None):
    """Apply the A -> B transition to C and decode the continuation D."""
    A, B, C = (np.asarray(s, dtype=np.float64) for s in (A, B, C))
    if not (A.shape[-1] == B.shape[-1] == C.shape[-1] == config.dim):
        raise tn.ShapeError(f"analogy_transfer: frame widths {A.shape[-1]}, {B.shape[-1]}, {C.shape[-1]} "
                            f"must all equal {config.dim}")
    single = C.ndim == 2
    feature = analogy_feature(params, config, A, B, C)
    last = C[-1][None] if single else C[:, -1, :]
    out = seqnet.decode_sequence(params, feature, last, T_fut or config.future).value
    return out[0] if single else out

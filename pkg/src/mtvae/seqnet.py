"""
LSTM sequence encoder / decoder shared by every model variant.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names;
the functions here take a dict of graph leaves (``Tensor``) with the same
keys so one forward pass can be differentiated w.r.t. all of them.

Cell equations (gate order input, forget, candidate, output)::

    a      = LN(x_t @ Wx + h @ Wh) * gain + b      # LN per gate block
    i, f   = sigmoid(a_i), sigmoid(a_f)
    g, o   = tanh(a_g), sigmoid(a_o)
    c'     = f * c + i * g
    h'     = o * tanh(c')

With layer norm disabled ``a = x_t @ Wx + h @ Wh + b``.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tn


@dataclass
class LstmState:
    h: tn.Tensor
    c: tn.Tensor


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_lstm(rng, prefix, input_dim, hidden, layer_norm=True):
    params = {
        f"{prefix}.Wx": uniform_init(rng, input_dim + hidden, (input_dim, 4 * hidden)),
        f"{prefix}.Wh": uniform_init(rng, input_dim + hidden, (hidden, 4 * hidden)),
        f"{prefix}.b": np.zeros(4 * hidden),
    }
    # a positive forget bias keeps early gradients alive
    params[f"{prefix}.b"][hidden:2 * hidden] = 1.0
    if layer_norm:
        params[f"{prefix}.gain"] = np.ones(4 * hidden)
    return params


def init_encoder(rng, dim, hidden, layer_norm=True):
    return init_lstm(rng, "enc", dim, hidden, layer_norm)


def init_decoder(rng, dim, hidden, feature_dim, layer_norm=True):
    params = init_lstm(rng, "dec", dim + feature_dim, hidden, layer_norm)
    params["dec.init_h.W"] = uniform_init(rng, feature_dim, (feature_dim, hidden))
    params["dec.init_h.b"] = np.zeros(hidden)
    params["dec.init_c.W"] = uniform_init(rng, feature_dim, (feature_dim, hidden))
    params["dec.init_c.b"] = np.zeros(hidden)
    params["dec.out.W"] = uniform_init(rng, hidden, (hidden, dim))
    params["dec.out.b"] = np.zeros(dim)
    return params


def lstm_step(params, prefix, state, x, epsilon=1e-5, fused=True):
    """One LSTM transition ``(h, c), x -> (h', c')`` for a batch of inputs.

    ``fused=False`` builds the same cell out of elementary graph ops; it is
    slower and kept as a cross-check for the fused kernel.
    """
    Wx = params[f"{prefix}.Wx"]
    x = tn._wrap(x)
    if x.shape[-1] != np.shape(tn._wrap(Wx).value)[0]:
        raise tn.ShapeError(f"lstm_step: input width {x.shape[-1]} but {prefix}.Wx expects "
                            f"{np.shape(tn._wrap(Wx).value)[0]}")
    hidden = np.shape(tn._wrap(params[f"{prefix}.Wh"]).value)[0]
    if fused:
        hc = tn.lstm_cell(x, state.h, state.c, Wx, params[f"{prefix}.Wh"], params[f"{prefix}.b"],
                          params.get(f"{prefix}.gain"), epsilon)
        return LstmState(tn.slice_last(hc, 0, hidden), tn.slice_last(hc, hidden, 2 * hidden))
    pre = tn.matmul(x, Wx) + tn.matmul(state.h, params[f"{prefix}.Wh"])
    gain = params.get(f"{prefix}.gain")
    if gain is not None:
        lead = pre.shape[:-1]
        blocks = tn.reshape(pre, lead + (4, hidden))
        normed = tn.layer_norm(blocks, tn.reshape(gain, (4, hidden)),
                               tn.reshape(params[f"{prefix}.b"], (4, hidden)), epsilon)
        pre = tn.reshape(normed, lead + (4 * hidden,))
    else:
        pre = pre + params[f"{prefix}.b"]
    i = tn.sigmoid(tn.slice_last(pre, 0, hidden))
    f = tn.sigmoid(tn.slice_last(pre, hidden, 2 * hidden))
    g = tn.tanh(tn.slice_last(pre, 2 * hidden, 3 * hidden))
    o = tn.sigmoid(tn.slice_last(pre, 3 * hidden, 4 * hidden))
    c = f * state.c + i * g
    h = o * tn.tanh(c)
    return LstmState(h, c)


def zero_state(batch, hidden):
    z = tn.constant(np.zeros((batch, hidden)))
    return LstmState(z, z)


def encode_sequence(params, frames, keep=1.0, rng=None, training=False):
    """Run the encoder over ``frames`` (batch, T, D) and return the final hidden state."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.shape[1] < 1:
        raise ValueError("encode_sequence: empty sequence")
    hidden = params["enc.Wh"].shape[0]
    state = zero_state(frames.shape[0], hidden)
    for t in range(frames.shape[1]):
        x = tn.constant(frames[:, t, :])
        if training and keep < 1.0:
            x = tn.dropout(x, keep, rng, training)
        state = lstm_step(params, "enc", state, x)
    return state.h


def decode_sequence(params, feature, last_observed, steps, keep=1.0, rng=None, training=False,
                    targets=None):
    """Autoregressive rollout of ``steps`` frames from a motion feature.

    The initial state is a pair of linear projections of ``feature``; each
    step consumes ``[previous frame, feature]`` and emits a linear readout of
    ``h``.  ``targets`` (batch, steps, D) switches on teacher forcing.
    Returns a (batch, steps, D) tensor.
    """
    if steps < 1:
        raise ValueError("decode_sequence: steps must be >= 1")
    feature = tn._wrap(feature)
    prev = tn._wrap(np.asarray(last_observed, dtype=np.float64))
    if prev.value.ndim == 1:
        prev = tn.constant(prev.value[None])
    state = LstmState(tn.matmul(feature, params["dec.init_h.W"]) + params["dec.init_h.b"],
                      tn.matmul(feature, params["dec.init_c.W"]) + params["dec.init_c.b"])
    frames = []
    for t in range(steps):
        x = tn.concat([prev, feature])
        if training and keep < 1.0:
            x = tn.dropout(x, keep, rng, training)
        state = lstm_step(params, "dec", state, x)
        y = tn.matmul(state.h, params["dec.out.W"]) + params["dec.out.b"]
        frames.append(y)
        prev = tn.constant(targets[:, t, :]) if targets is not None else y
    return tn.stack(frames, axis=1)

"""Two-stream encoders: an attribute-feature MLP for the visual side and a
frozen word table -> Bi-GRU -> max pool -> projection for the textual side.

Each stream exists as a query/key pair: the query parameters receive
gradients, the key parameters only ever move by exponential moving average
toward the query parameters (momentum_update).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass
class EncoderConfig:
    input_dim: int = 48          # visual attribute-feature dimension
    visual_hidden: int = 512
    embed_dim: int = 64          # frozen word-table embedding width
    gru_hidden: int = 128        # per direction
    feature_dim: int = 256       # shared output dimension D
    vocab_size: int = 64
    max_len: int = 64

    def validate(self):
        for name in ("input_dim", "visual_hidden", "embed_dim", "gru_hidden",
                     "feature_dim", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


class FrozenWordTable:
    """Immutable per-word embedding table, a deterministic function of its seed.

    Rows are unit-Gaussian draws normalized to unit L2 norm, giving each word
    a fixed, distinct direction. Gradients never flow into the table.
    """

    def __init__(self, vocab_size, embed_dim, seed):
        self.vocab_size = int(vocab_size)
        self.embed_dim = int(embed_dim)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        table = rng.standard_normal((self.vocab_size, self.embed_dim))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        table.flags.writeable = False
        self.table = table

    def lookup(self, token_id):
        if not 0 <= token_id < self.vocab_size:
            raise ValueError(f"token id {token_id} out of vocabulary (size {self.vocab_size})")
        return self.table[token_id]


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_visual_params(cfg, rng):
    """2-layer MLP: input -> hidden (tanh) -> feature_dim (linear)."""
    return {
        "w1": T.parameter(_uniform_init(rng, (cfg.visual_hidden, cfg.input_dim), cfg.input_dim)),
        "b1": T.parameter(np.zeros(cfg.visual_hidden)),
        "w2": T.parameter(_uniform_init(rng, (cfg.feature_dim, cfg.visual_hidden), cfg.visual_hidden)),
        "b2": T.parameter(np.zeros(cfg.feature_dim)),
    }


def _init_gru_direction(cfg, rng, prefix):
    e, h = cfg.embed_dim, cfg.gru_hidden
    params = {}
    for gate in ("z", "r", "h"):
        params[f"{prefix}_w{gate}"] = T.parameter(_uniform_init(rng, (h, e + h), e + h))
        params[f"{prefix}_b{gate}"] = T.parameter(np.zeros(h))
    return params


def init_text_params(cfg, rng):
    """Forward GRU + backward GRU + linear projection to feature_dim."""
    params = {}
    params.update(_init_gru_direction(cfg, rng, "fwd"))
    params.update(_init_gru_direction(cfg, rng, "bwd"))
    two_h = 2 * cfg.gru_hidden
    params["proj_w"] = T.parameter(_uniform_init(rng, (cfg.feature_dim, two_h), two_h))
    params["proj_b"] = T.parameter(np.zeros(cfg.feature_dim))
    return params


def encode_visual(params, x):
    """Encode one attribute-feature vector to a unit-norm embedding."""
    if not isinstance(x, Tensor):
        x = T.constant(np.asarray(x, dtype=np.float64))
    if x.data.ndim != 1 or x.data.shape[0] != params["w1"].data.shape[1]:
        raise T.ShapeError(
            f"encode_visual: input shape {x.data.shape} does not match "
            f"configured input_dim {params['w1'].data.shape[1]}")
    h = T.tanh(T.add(T.matvec(params["w1"], x), params["b1"]))
    out = T.add(T.matvec(params["w2"], h), params["b2"])
    return T.l2_normalize(out)


def gru_cell(params, prefix, x_t, h_prev):
    """One GRU step: z=sig(Wz[x,h]+bz), r=sig(Wr[x,h]+br),
    hh=tanh(Wh[x, r*h]+bh), h' = (1-z)*h + z*hh."""
    xh = T.concat([x_t, h_prev])
    z = T.sigmoid(T.add(T.matvec(params[f"{prefix}_wz"], xh), params[f"{prefix}_bz"]))
    r = T.sigmoid(T.add(T.matvec(params[f"{prefix}_wr"], xh), params[f"{prefix}_br"]))
    xrh = T.concat([x_t, T.mul(r, h_prev)])
    hh = T.tanh(T.add(T.matvec(params[f"{prefix}_wh"], xrh), params[f"{prefix}_bh"]))
    return T.add(T.mul(T.sub(1.0, z), h_prev), T.mul(z, hh))


def encode_text(params, table, tokens, max_len=None):
    """Frozen lookups -> Bi-GRU -> per-step [h_fwd;h_bwd] -> max pool -> projection.

    The table is consulted read-only; gradients reach only the GRU and
    projection parameters.
    """
    tokens = list(tokens)
    if len(tokens) == 0:
        raise ValueError("encode_text: empty token sequence")
    if max_len is not None and len(tokens) > max_len:
        raise ValueError(f"encode_text: sequence length {len(tokens)} exceeds max_len {max_len}")
    embeds = [T.constant(table.lookup(t)) for t in tokens]
    hdim = params["fwd_wz"].data.shape[0]

    h = T.constant(np.zeros(hdim))
    fwd_states = []
    for e in embeds:
        h = gru_cell(params, "fwd", e, h)
        fwd_states.append(h)

    h = T.constant(np.zeros(hdim))
    bwd_states = [None] * len(embeds)
    for i in range(len(embeds) - 1, -1, -1):
        h = gru_cell(params, "bwd", embeds[i], h)
        bwd_states[i] = h

    steps = [T.concat([f, b]) for f, b in zip(fwd_states, bwd_states)]
    pooled = T.max_pool_over_time(T.stack_rows(steps))
    out = T.add(T.matvec(params["proj_w"], pooled), params["proj_b"])
    return T.l2_normalize(out)


class EncoderPair:
    """Query parameters theta_q (trainable) and a momentum-tracked copy theta_k.

    theta_k starts as an exact copy of theta_q and never receives gradients;
    it only moves through momentum_update.
    """

    def __init__(self, theta_q):
        self.theta_q = theta_q
        self.theta_k = {name: p.data.copy() for name, p in theta_q.items()}

    def key_tensors(self):
        """theta_k wrapped as non-trainable tensors for forward evaluation."""
        return {name: T.constant(arr) for name, arr in self.theta_k.items()}


def momentum_update(pairs, m):
    """theta_k <- m*theta_k + (1-m)*theta_q, elementwise, for every pair given."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"momentum m must be in [0, 1], got {m}")
    for pair in pairs:
        for name, p in pair.theta_q.items():
            k = pair.theta_k[name]
            k *= m
            k += (1.0 - m) * p.data

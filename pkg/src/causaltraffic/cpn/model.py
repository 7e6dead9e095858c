"""Forward pass of the causal-enhanced forecaster.

Shapes: ``B`` windows, lookback ``T``, hidden ``d``, ``K`` neighbor slots,
``H`` horizon steps. All speeds are in normalized units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..features import NEUTRAL
from ..graph import log_bias
from ..numerics import Tensor
from .config import ModelConfig

# parameters that belong to the causal stream; frozen in the first phase
CAUSAL_PARAMS = ("causal_w1", "causal_b1", "causal_w2", "causal_b2", "beta_attn",
                 "acausal_w1", "acausal_b1", "acausal_w2", "acausal_b2", "g_raw")
G_RAW_INIT = -2.0


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; norms identity;
    event bias 0; gate logit -2."""
    d, Dt, Dc, H = cfg.hidden, cfg.input_dim, cfg.causal_dim, cfg.horizon
    shapes: list[tuple[str, tuple, str]] = [
        ("gru_w", (Dt, 3 * d), "w"), ("gru_u", (d, 3 * d), "w"), ("gru_b", (3 * d,), "zero"),
        ("graph_q", (d, d), "w"), ("graph_k", (d, d), "w"), ("graph_v", (d, d), "w"),
        ("fuse_q", (d, d), "w"), ("fuse_k", (d, d), "w"), ("fuse_v", (d, d), "w"),
        ("fuse_o", (d, d), "w"), ("fuse_ln_g", (d,), "one"), ("fuse_ln_b", (d,), "zero"),
        ("causal_w1", (Dc, d), "w"), ("causal_b1", (d,), "zero"),
        ("causal_w2", (d, d), "w"), ("causal_b2", (d,), "zero"),
        ("chan_ln_g", (d,), "one"), ("chan_ln_b", (d,), "zero"),
        ("beta_attn", (), "zero"),
    ]
    for layer in range(cfg.layers):
        p = f"attn{layer}_"
        shapes += [(p + "q", (d, d), "w"), (p + "k", (d, d), "w"), (p + "v", (d, d), "w"),
                   (p + "o", (d, d), "w"), (p + "ln_g", (d,), "one"), (p + "ln_b", (d,), "zero")]
    shapes += [
        ("base_w1", (d, d), "w"), ("base_b1", (d,), "zero"),
        ("base_w2", (d, H), "w"), ("base_b2", (H,), "zero"),
        ("acausal_w1", (d, d), "w"), ("acausal_b1", (d,), "zero"),
        ("acausal_w2", (d, H), "w"), ("acausal_b2", (H,), "zero"),
        ("g_raw", (), "gate"),
    ]
    out = {}
    for name, shape, kind in shapes:
        if kind == "w":
            v = _uniform(rng, shape[0], shape)
        elif kind == "one":
            v = np.ones(shape)
        elif kind == "gate":
            v = np.full(shape, G_RAW_INIT)
        else:
            v = np.zeros(shape)
        out[name] = Tensor(v, requires_grad=True, name=name)
    return out


# -- stages ------------------------------------------------------------------

def gru_encode(x, p) -> Tensor:
    """Run the GRU over ``x`` (B, T, D) from a zero state; returns (B, T, d).

    ``z = sig(x Wz + h Uz + bz)``, ``r = sig(x Wr + h Ur + br)``,
    ``n = tanh(x Wn + r * (h Un) + bn)``, ``h' = (1 - z) * n + z * h``.
    """
    x = nx.as_tensor(x)
    B, T, _ = x.shape
    d = p["gru_u"].shape[0]
    gx = x @ p["gru_w"] + p["gru_b"]
    h = Tensor(np.zeros((B, d)))
    states = []
    for t in range(T):
        gt = gx[:, t, :]
        hu = h @ p["gru_u"]
        z = nx.sigmoid(gt[:, :d] + hu[:, :d])
        r = nx.sigmoid(gt[:, d:2 * d] + hu[:, d:2 * d])
        n = nx.tanh(gt[:, 2 * d:] + r * hu[:, 2 * d:])
        h = (1.0 - z) * n + z * h
        states.append(h)
    return nx.stack(states, axis=1)


def positional_encoding(T: int, d: int) -> np.ndarray:
    """``PE[t, 2k] = sin(t / 10000^(2k/d))``, ``PE[t, 2k+1] = cos(...)``, t = 0..T-1."""
    pos = np.arange(T)[:, None]
    rate = 10000.0 ** (np.arange(0, d, 2) / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe


def encode_neighbors(xn, p) -> Tensor:
    """Shared GRU over neighbor sequences (B, K, T, D) -> (B, K, T, d), with no
    gradient path back into the encoder."""
    xn = np.asarray(xn.value if isinstance(xn, Tensor) else xn, dtype=np.float64)
    B, K, T, D = xn.shape
    d = p["gru_u"].shape[0]
    if K == 0:
        return Tensor(np.zeros((B, 0, T, d)))
    with nx.no_grad():
        h = gru_encode(xn.reshape(B * K, T, D), p)
    return nx.detach(h.reshape(B, K, T, d))


def graph_prior_attention(z, hn, weights, valid, p) -> Tensor:
    """Per step, attend from the target state to neighbor states.

    Scores are scaled dot products plus ``log(max(w, 1e-6))``; padded
    neighbor slots (``valid == 0``) are masked. Returns (B, T, d); all zeros
    for a window without neighbors.
    """
    B, T, d = z.shape
    K = hn.shape[1]
    if K == 0:
        return Tensor(np.zeros((B, T, d)))
    q = z @ p["graph_q"]                                   # B,T,d
    k = nx.swapaxes(hn @ p["graph_k"], 1, 2)               # B,T,K,d
    v = nx.swapaxes(hn @ p["graph_v"], 1, 2)               # B,T,K,d
    scores = (k @ q.reshape(B, T, d, 1)).reshape(B, T, K) / math.sqrt(d)
    bias = log_bias(np.asarray(weights, dtype=np.float64))[:, None, :]
    mask = np.where(np.asarray(valid, dtype=bool), 0.0, -np.inf)[:, None, :]
    att = nx.masked_softmax(scores + bias, np.broadcast_to(mask, (B, T, K)), axis=-1)
    return (att.reshape(B, T, 1, K) @ v).reshape(B, T, d)


def spatiotemporal_fuse(z, g, has_neighbors, p) -> Tensor:
    """One attention step per time index with the target state as query and
    ``[z_t, g_t]`` as keys/values, then residual and layer norm."""
    B, T, d = z.shape
    q = z @ p["fuse_q"]
    tokens = nx.stack([z, g], axis=2)                      # B,T,2,d
    k = tokens @ p["fuse_k"]
    v = tokens @ p["fuse_v"]
    scores = (k @ q.reshape(B, T, d, 1)).reshape(B, T, 2) / math.sqrt(d)
    mask = np.zeros((B, T, 2))
    mask[~np.asarray(has_neighbors, dtype=bool), :, 1] = -np.inf
    att = nx.masked_softmax(scores, mask, axis=-1)
    ctx = (att.reshape(B, T, 1, 2) @ v).reshape(B, T, d)
    return nx.layer_norm(z + ctx @ p["fuse_o"], p["fuse_ln_g"], p["fuse_ln_b"])


def causal_embedding(E, p) -> Tensor:
    """Two-layer tanh MLP over scaled causal features (B, T, Dc) -> (B, T, d)."""
    hid = nx.tanh(nx.as_tensor(E) @ p["causal_w1"] + p["causal_b1"])
    return hid @ p["causal_w2"] + p["causal_b2"]


def autoregressive_mask(T: int) -> np.ndarray:
    return np.where(np.tril(np.ones((T, T), dtype=bool)), 0.0, -np.inf)


def attention_block(z, m, layer: int, heads: int, p) -> tuple[Tensor, Tensor]:
    """Multi-head causal self-attention with a shared event bias on keys.

    Score of query ``t`` on key ``s``: ``q_t . k_s / sqrt(d_k) + beta * m_s``,
    with ``s > t`` masked. Returns the updated stream and per-head weights
    (B, heads, T, T).
    """
    B, T, d = z.shape
    dk = d // heads
    pre = f"attn{layer}_"

    def split(t):
        return nx.swapaxes(t.reshape(B, T, heads, dk), 1, 2)    # B,h,T,dk

    q, k, v = (split(z @ p[pre + s]) for s in ("q", "k", "v"))
    scores = (q @ nx.swapaxes(k, 2, 3)) / math.sqrt(dk)         # B,h,T,T
    ev = Tensor(np.asarray(m, dtype=np.float64).reshape(B, 1, 1, T))
    scores = scores + p["beta_attn"] * ev
    alpha = nx.masked_softmax(scores, autoregressive_mask(T), axis=-1)
    ctx = nx.swapaxes(alpha @ v, 1, 2).reshape(B, T, d)
    out = nx.layer_norm(z + ctx @ p[pre + "o"], p[pre + "ln_g"], p[pre + "ln_b"])
    return out, alpha


def _mlp_head(h, p, prefix):
    return nx.tanh(h @ p[prefix + "_w1"] + p[prefix + "_b1"]) @ p[prefix + "_w2"] + p[prefix + "_b2"]


@dataclass
class ForwardOutput:
    y_hat: Tensor       # (B, H)
    y_base: Tensor      # (B, H)
    a_causal: Tensor    # (B, H)
    gate: Tensor        # scalar
    alpha: Tensor       # (B, heads, T, T) from the last block
    alphas: list        # per block

    @property
    def attention_map(self) -> np.ndarray:
        """Head-averaged weights of the last block, (B, T, T)."""
        return self.alpha.value.mean(axis=1)


@dataclass
class Batch:
    x: np.ndarray          # (B, T, Dt)
    xn: np.ndarray         # (B, K, T, Dt)
    nw: np.ndarray         # (B, K) normalized neighbor weights
    nvalid: np.ndarray     # (B, K) bool
    E: np.ndarray          # (B, T, Dc) raw causal features
    m: np.ndarray          # (B, T) event indicator
    y: np.ndarray | None = None        # (B, H) normalized targets
    event: np.ndarray | None = None    # (B,) window carries an event

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx) -> "Batch":
        pick = lambda a: None if a is None else a[idx]
        return Batch(self.x[idx], self.xn[idx], self.nw[idx], self.nvalid[idx], self.E[idx],
                     self.m[idx], pick(self.y), pick(self.event))

    def neutral(self) -> "Batch":
        """Same windows with event-free causal features."""
        E = np.broadcast_to(NEUTRAL, self.E.shape).copy()
        return Batch(self.x, self.xn, self.nw, self.nvalid, E, np.zeros_like(self.m),
                     self.y, self.event)


def forward(p, cfg: ModelConfig, batch: Batch, neighbor_states: Tensor | None = None) -> ForwardOutput:
    """Full pass. ``neighbor_states`` may supply precomputed (detached)
    neighbor encodings, e.g. to hold them fixed in a finite-difference check."""
    T, d = cfg.lookback, cfg.hidden
    z = gru_encode(batch.x, p) + positional_encoding(T, d)
    hn = encode_neighbors(batch.xn, p) if neighbor_states is None else neighbor_states
    g = graph_prior_attention(z, hn, batch.nw, batch.nvalid, p)
    z = spatiotemporal_fuse(z, g, np.asarray(batch.nvalid).any(axis=1), p)
    c = causal_embedding(np.asarray(batch.E) / np.asarray(cfg.feature_scale), p)
    z = nx.layer_norm(z + c, p["chan_ln_g"], p["chan_ln_b"])
    alphas = []
    for layer in range(cfg.layers):
        z, a = attention_block(z, batch.m, layer, cfg.heads, p)
        alphas.append(a)
    last = z[:, T - 1, :]
    y_base = _mlp_head(last, p, "base")
    a_causal = _mlp_head(last, p, "acausal")
    gate = nx.sigmoid(p["g_raw"])
    return ForwardOutput(y_base + gate * a_causal, y_base, a_causal, gate, alphas[-1], alphas)


def base_counterfactual(p, cfg: ModelConfig, batch: Batch,
                        neighbor_states: Tensor | None = None) -> Tensor:
    """Base-head output with the causal stream neutralized; no gradient."""
    with nx.no_grad():
        return forward(p, cfg, batch.neutral(), neighbor_states).y_base

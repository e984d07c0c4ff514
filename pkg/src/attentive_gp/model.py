"""Attention encoder-decoder feature extractor.

The extractor maps an input sequence ``x_1..x_L`` and the *shifted* output
sequence (a learned start token, then ``y_1..y_{L-1}``) to one feature vector
per step.  Decoder self-attention is causally masked, so the feature at step
``i`` depends on ``y_1..y_{i-1}`` only.

Parameters are kept in a flat ``dict[str, np.ndarray]`` with deterministic key
order; forward functions take a matching dict of tape :class:`Var` handles.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Var
from .gp import GPHyperparams

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_x: int = 16          # embedding width, also the residual stream width
    d_h: int = 16          # attention output width (must equal d_x for residuals)
    n_layers: int = 1
    n_heads: int = 2
    d_k: int = 8           # per-head query/key/value width
    d_c: int = 16          # encoder output width
    F: int = 2             # feature width fed to the GP layer
    L: int = 16
    input_dim: int = 1
    d_ff: int = 32

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"ModelConfig.{name} must be a positive integer, got {v!r}")
        if self.d_h != self.d_x:
            raise ValueError("d_h must equal d_x: attention sublayers are residual")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def _head_shapes(prefix: str, d_q: int, d_kv: int, cfg: ModelConfig) -> dict[str, tuple]:
    # heads are stacked column-wise: head h owns columns h*d_k:(h+1)*d_k
    hk = cfg.n_heads * cfg.d_k
    return {
        f"{prefix}.wq": (d_q, hk),
        f"{prefix}.wk": (d_kv, hk),
        f"{prefix}.wv": (d_kv, hk),
        f"{prefix}.wo": (hk, cfg.d_h),
    }


def _ff_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple]:
    return {
        f"{prefix}.w1": (cfg.d_x, cfg.d_ff),
        f"{prefix}.b1": (cfg.d_ff,),
        f"{prefix}.w2": (cfg.d_ff, cfg.d_x),
        f"{prefix}.b2": (cfg.d_x,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every network weight, in canonical order."""
    s: dict[str, tuple] = {
        "embed_x.w": (cfg.input_dim, cfg.d_x),
        "embed_x.b": (cfg.d_x,),
        "embed_y.w": (1, cfg.d_x),
        "embed_y.b": (cfg.d_x,),
        "start": (1, cfg.d_x),
    }
    for l in range(cfg.n_layers):
        s.update(_head_shapes(f"enc{l}.self", cfg.d_x, cfg.d_x, cfg))
        s.update(_ff_shapes(f"enc{l}.ff", cfg))
    s["enc_out.w"] = (cfg.d_x, cfg.d_c)
    s["enc_out.b"] = (cfg.d_c,)
    for l in range(cfg.n_layers):
        s.update(_head_shapes(f"dec{l}.self", cfg.d_x, cfg.d_x, cfg))
        s.update(_head_shapes(f"dec{l}.cross", cfg.d_x, cfg.d_c, cfg))
        s.update(_ff_shapes(f"dec{l}.ff", cfg))
    s["feat.w"] = (cfg.d_x, cfg.F)
    s["feat.b"] = (cfg.F,)
    return s


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)); biases zero; start token ~ U(-1, 1)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def flatten(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(v) for v in params.values()]) if params else np.zeros(0)


def unflatten(vec: np.ndarray, like: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    total = sum(v.size for v in like.values())
    if len(vec) != total:
        raise ShapeError(f"vector of length {len(vec)} does not match {total} parameters")
    out, i = {}, 0
    for k, v in like.items():
        out[k] = np.asarray(vec[i:i + v.size]).reshape(v.shape)
        i += v.size
    return out


def as_vars(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Var]:
    return {k: tape.leaf(v, k) for k, v in params.items()}


# -- building blocks ---------------------------------------------------------


def positional_encoding(L: int, d: int) -> np.ndarray:
    """Sinusoidal table: sin on even columns, cos on odd, frequency 10000^(-2i/d)."""
    if L < 1 or d < 1:
        raise ValueError("positional_encoding needs L, d >= 1")
    pos = np.arange(L)[:, None]
    i2 = np.arange(0, d, 2)
    angle = pos / np.power(10000.0, i2 / d)
    pe = np.zeros((L, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    out = ad.matmul(x, w)
    return out if b is None else out + b


def embed(seq: Var, w: Var, pe, b: Var | None = None) -> Var:
    """``seq @ w (+ b) + pe``; ``pe`` broadcasts over a leading batch axis."""
    if seq.shape[-1] != w.shape[0]:
        raise ShapeError(f"embed: sequence width {seq.shape[-1]} vs weight {w.shape}")
    if np.shape(pe.value if isinstance(pe, Var) else pe) != (seq.shape[-2], w.shape[1]):
        raise ShapeError("embed: positional table shape does not match")
    return linear(seq, w, b) + pe


def causal_mask(L: int) -> np.ndarray:
    """Additive mask: 0 where key j <= query i, MASK_VALUE above the diagonal."""
    return np.triu(np.full((L, L), MASK_VALUE), k=1)


def attention(queries_src: Var, keys_src: Var, wq: Var, wk: Var, wv: Var,
              mask: np.ndarray | None = None, return_weights: bool = False):
    """Single-head scaled dot-product attention.

    Compatibilities are ``(q_i Wq)(k_j Wk)^T / sqrt(width)`` where ``width``
    is the projection width, masked entries get an additive -1e9, weights are
    a row softmax and the output is the weighted sum of projected values.
    """
    q = ad.matmul(queries_src, wq)
    k = ad.matmul(keys_src, wk)
    v = ad.matmul(keys_src, wv)
    out, alpha = _scaled_dot(q, k, v, mask)
    return (out, alpha) if return_weights else out


def _scaled_dot(q: Var, k: Var, v: Var, mask):
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        if mask.shape != scores.shape[-2:]:
            raise ShapeError(f"mask shape {mask.shape} vs scores {scores.shape[-2:]}")
        scores = scores + mask
    alpha = ad.softmax_rows(scores)
    return ad.matmul(alpha, v), alpha


def _split_heads(a: Var, n_heads: int) -> Var:
    """(..., L, H*d) -> (..., H, L, d)."""
    lead, (L, hd) = a.shape[:-2], a.shape[-2:]
    r = ad.reshape(a, lead + (L, n_heads, hd // n_heads))
    nl = len(lead)
    return ad.permute(r, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def _merge_heads(a: Var) -> Var:
    """(..., H, L, d) -> (..., L, H*d)."""
    lead, (H, L, d) = a.shape[:-3], a.shape[-3:]
    nl = len(lead)
    p = ad.permute(a, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return ad.reshape(p, lead + (L, H * d))


def multi_head_attention(queries_src: Var, keys_src: Var, p: dict[str, Var], prefix: str,
                         n_heads: int, mask: np.ndarray | None = None) -> Var:
    """Heads run in one batched product; outputs are concatenated and projected by ``wo``."""
    if n_heads < 1:
        raise ValueError("n_heads must be >= 1")
    wq, wk, wv = p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"]
    if wq.shape[1] % n_heads or wv.shape[1] % n_heads:
        raise ShapeError(f"projection widths {wq.shape[1]}, {wv.shape[1]} not divisible by {n_heads} heads")
    q = _split_heads(ad.matmul(queries_src, wq), n_heads)
    k = _split_heads(ad.matmul(keys_src, wk), n_heads)
    v = _split_heads(ad.matmul(keys_src, wv), n_heads)
    out, _ = _scaled_dot(q, k, v, mask)
    return ad.matmul(_merge_heads(out), p[f"{prefix}.wo"])


def feedforward(x: Var, p: dict[str, Var], prefix: str) -> Var:
    hidden = ad.relu(linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def encoder_forward(x_embedded: Var, p: dict[str, Var], cfg: ModelConfig) -> Var:
    h = x_embedded
    for l in range(cfg.n_layers):
        h = h + multi_head_attention(h, h, p, f"enc{l}.self", cfg.n_heads)
        h = h + feedforward(h, p, f"enc{l}.ff")
    return linear(h, p["enc_out.w"], p["enc_out.b"])


def decoder_forward(y_embedded: Var, enc_out: Var, p: dict[str, Var], cfg: ModelConfig) -> Var:
    L = y_embedded.shape[-2]
    mask = causal_mask(L)
    s = y_embedded
    for l in range(cfg.n_layers):
        s = s + multi_head_attention(s, s, p, f"dec{l}.self", cfg.n_heads, mask)
        s = s + multi_head_attention(s, enc_out, p, f"dec{l}.cross", cfg.n_heads)
        s = s + feedforward(s, p, f"dec{l}.ff")
    return linear(s, p["feat.w"], p["feat.b"])


def shifted_outputs(y) -> np.ndarray:
    """(..., L) targets -> (..., L, 1) decoder inputs ``[0, y_1, ..., y_{L-1}]``."""
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(y.shape + (1,))
    out[..., 1:, 0] = y[..., :-1]
    return out


def embed_outputs(tape: Tape, y_shift, p: dict[str, Var], cfg: ModelConfig) -> Var:
    """Embed shifted outputs; position 0 carries the learned start token."""
    ys = y_shift if isinstance(y_shift, Var) else tape.constant(y_shift)
    L = ys.shape[-2]
    first = np.zeros((L, 1))
    first[0, 0] = 1.0
    start = ad.matmul(tape.constant(first), p["start"])
    return embed(ys, p["embed_y.w"], positional_encoding(L, cfg.d_x), p["embed_y.b"]) + start


def features(tape: Tape, p: dict[str, Var], cfg: ModelConfig, x, y_shift) -> Var:
    """Feature vectors for a batch.

    ``x`` is (B, L, input_dim) and ``y_shift`` is (B, L, 1) (see
    :func:`shifted_outputs`); either may already be a Var.  Returns (B, L, F).
    """
    xs = x if isinstance(x, Var) else tape.constant(x)
    if xs.value.ndim == 2:
        raise ShapeError("features expects a leading batch axis")
    L = xs.shape[-2]
    pe = positional_encoding(L, cfg.d_x)
    enc = encoder_forward(embed(xs, p["embed_x.w"], pe, p["embed_x.b"]), p, cfg)
    dec_in = embed_outputs(tape, y_shift, p, cfg)
    return decoder_forward(dec_in, enc, p, cfg)


def compute_features(params: dict[str, np.ndarray], cfg: ModelConfig, x, y) -> np.ndarray:
    """Teacher-forced features as a plain array, (B, L, F)."""
    tape = Tape()
    p = as_vars(tape, params)
    return features(tape, p, cfg, np.asarray(x, dtype=np.float64), shifted_outputs(y)).value


# -- Gaussian-head baseline --------------------------------------------------


def baseline_head_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    return {"head.mean.w": (cfg.F, 1), "head.mean.b": (1,),
            "head.logvar.w": (cfg.F, 1), "head.logvar.b": (1,)}


def init_baseline_head(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    bound = np.sqrt(1.0 / cfg.F)
    return {k: (rng.uniform(-bound, bound, size=s) if len(s) == 2 else np.zeros(s))
            for k, s in baseline_head_shapes(cfg).items()}


def baseline_gaussian_head_forward(feats: Var, p: dict[str, Var]) -> tuple[Var, Var]:
    """Per-step mean and log-variance from features of shape (..., F)."""
    mean = linear(feats, p["head.mean.w"], p["head.mean.b"])
    log_var = linear(feats, p["head.logvar.w"], p["head.logvar.b"])
    return mean, log_var


def gaussian_nll(mean: Var, log_var: Var, target) -> Var:
    """Sum over entries of 0.5 * (log 2pi + log_var + (t - mean)^2 / exp(log_var))."""
    t = np.asarray(target, dtype=np.float64).reshape(mean.shape)
    r = ad.sub(mean, t)
    quad = ad.mul(ad.mul(r, r), ad.exp(ad.neg(log_var)))
    n = mean.value.size
    return ad.scale(ad.total(quad + log_var), 0.5) + 0.5 * n * np.log(2 * np.pi)


# -- full model --------------------------------------------------------------


class AttentiveGP:
    """Feature-extractor weights plus GP hyperparameters."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray], hyp: GPHyperparams):
        self.cfg = cfg
        self.params = params
        self.hyp = hyp

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, lengthscale: float = 1.0,
             noise: float = 0.1) -> "AttentiveGP":
        return cls(cfg, init_params(cfg, seed), GPHyperparams.default(cfg.F, lengthscale, noise))

    def copy(self) -> "AttentiveGP":
        return AttentiveGP(self.cfg, {k: v.copy() for k, v in self.params.items()},
                           GPHyperparams(self.hyp.log_lengthscales.copy(), self.hyp.log_noise))

    def features(self, x, y) -> np.ndarray:
        return compute_features(self.params, self.cfg, x, y)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.hyp.as_dict()}

    @classmethod
    def from_state_dict(cls, cfg: ModelConfig, state: dict[str, np.ndarray]) -> "AttentiveGP":
        shapes = param_shapes(cfg)
        missing = [k for k in shapes if k not in state]
        bad = [k for k, s in shapes.items() if k in state and tuple(state[k].shape) != s]
        if missing or bad or "gp.log_noise" not in state or "gp.log_lengthscales" not in state:
            raise ShapeError(f"checkpoint does not match config: missing={missing} mismatched={bad}")
        if state["gp.log_lengthscales"].shape != (cfg.F,):
            raise ShapeError("checkpoint lengthscales do not match feature width F")
        params = {k: np.array(state[k], dtype=np.float64) for k in shapes}
        return cls(cfg, params, GPHyperparams.from_dict(state))

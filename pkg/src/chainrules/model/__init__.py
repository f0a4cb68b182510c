"""
The differentiable rule-reduction model.

A rule body is embedded relation by relation.  While it is longer than the
window size, every contiguous window is encoded, a selector scores the
windows, the best one is turned into a single embedding by attending over
all candidate heads, and that embedding replaces the window in the body.
The remaining short sequence is encoded once more and the final attention
``theta`` is the distribution over heads, slot 0 being the null head.
"""

import csv
import logging

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from chainrules.model import layers
from chainrules.model.layers import AttendCache, EncodeCache, Params, SelectorCache


_LOGGER = logging.getLogger(__name__)

ENCODERS = ("rnn", "mlp")
SELECTIONS = ("hard", "soft", "random")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    window_size: int = 2
    # Selector hidden width; the embedding dimension when unset.
    hidden: Optional[int] = None
    # Half-width of the uniform initialisation; 1/sqrt(d) when unset.
    init_scale: Optional[float] = None
    encoder: str = "rnn"
    selection: str = "hard"
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ModelError("d must be positive")
        if self.window_size < 2:
            raise ModelError("window_size must be at least 2")
        if self.hidden is not None and self.hidden < 1:
            raise ModelError("hidden must be positive")
        if self.encoder not in ENCODERS:
            raise ModelError(f"encoder must be one of {ENCODERS}")
        if self.selection not in SELECTIONS:
            raise ModelError(f"selection must be one of {SELECTIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ModelError("dtype must be float32 or float64")

    @property
    def hidden_width(self) -> int:
        return self.hidden if self.hidden is not None else self.d

    @property
    def scale(self) -> float:
        if self.init_scale is not None:
            return self.init_scale
        return float(1.0 / np.sqrt(self.d))

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


_BASE_PARAMS = (
    "E",
    "W_ih",
    "W_hh",
    "b",
    "h0",
    "S_W1",
    "S_b1",
    "S_w2",
    "S_b2",
    "W_Q",
    "W_K",
)


def param_names(cfg: ModelConfig) -> Tuple[str, ...]:
    """Tensors a model of this configuration has."""
    return _BASE_PARAMS + (("M_W", "M_b") if cfg.encoder == "mlp" else ())


def init_params(
    cfg: ModelConfig,
    num_relations: int,
    rng: Optional[np.random.Generator] = None,
) -> Params:
    """Uniform initialisation in ``[-scale, scale]``; biases start at zero."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    d, k, a = cfg.d, cfg.hidden_width, cfg.scale
    dtype = np.dtype(cfg.dtype)

    def uniform(*shape: int) -> np.ndarray:
        return rng.uniform(-a, a, size=shape).astype(dtype)

    params: Params = {
        "E": uniform(num_relations, d),
        "W_ih": uniform(d, d),
        "W_hh": uniform(d, d),
        "b": np.zeros(d, dtype=dtype),
        "h0": np.zeros(d, dtype=dtype),
        "S_W1": uniform(k, d),
        "S_b1": np.zeros(k, dtype=dtype),
        "S_w2": uniform(k),
        "S_b2": np.zeros(1, dtype=dtype),
        "W_Q": uniform(d, d),
        "W_K": uniform(d, d),
    }
    if cfg.encoder == "mlp":
        params["M_W"] = uniform(d, cfg.window_size * d)
        params["M_b"] = np.zeros(d, dtype=dtype)
    return params


def num_heads(params: Params) -> int:
    """Number of relation heads, excluding the null slot."""
    return int(params["E"].shape[0])


def class_index(heads: np.ndarray, null_id: int) -> np.ndarray:
    """Map head relation ids to attention slots: null to 0, ``r`` to ``r+1``."""
    heads = np.asarray(heads, dtype=np.int64)
    return np.where(heads == null_id, 0, heads + 1)


class StepCache(NamedTuple):
    length: int
    windows: EncodeCache
    selector: SelectorCache
    encodings: np.ndarray
    mu: np.ndarray
    chosen: np.ndarray
    gather: np.ndarray
    attend: AttendCache


class BatchCache(NamedTuple):
    bodies: np.ndarray
    steps: Tuple[StepCache, ...]
    final_encode: EncodeCache
    final_attend: AttendCache


def forward_batch(
    params: Params,
    cfg: ModelConfig,
    bodies: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, BatchCache]:
    """Reduce a batch of equal-length bodies; returns final theta and cache."""
    bodies = np.asarray(bodies, dtype=np.int64)
    if bodies.ndim != 2 or bodies.shape[1] < 2:
        raise ModelError("bodies must be a 2-D batch of length 2 or more")
    if bodies.size and (bodies.min() < 0 or bodies.max() >= num_heads(params)):
        raise ModelError("body contains an unknown relation id")
    s = cfg.window_size
    batch, d = bodies.shape[0], cfg.d
    rows = np.arange(batch)
    if cfg.selection == "random" and rng is None:
        rng = np.random.default_rng(cfg.seed)
    xs = params["E"][bodies]
    steps: List[StepCache] = []
    while xs.shape[1] > s:
        n = xs.shape[1]
        nw = n - s + 1
        windows = np.stack([xs[:, i : i + s] for i in range(nw)], axis=1)
        enc_cache = layers.encode_forward(
            params, cfg.encoder, s, windows.reshape(batch * nw, s, d)
        )
        flat = layers.encoded(enc_cache)
        scores, sel_cache = layers.selector_forward(params, flat)
        encodings = flat.reshape(batch, nw, d)
        mu = layers.softmax(scores.reshape(batch, nw), axis=1)
        if cfg.selection == "random":
            assert rng is not None
            chosen = rng.integers(nw, size=batch)
            w = encodings[rows, chosen]
        else:
            # argmax breaks ties by lowest index.
            chosen = np.argmax(mu, axis=1)
            if cfg.selection == "hard":
                w = mu[rows, chosen][:, None] * encodings[rows, chosen]
            else:
                w = np.einsum("bn,bnd->bd", mu, encodings)
        att = layers.attend_forward(params, w)
        j = np.arange(nw)[None, :]
        gather = np.where(j < chosen[:, None], j, j + s - 1)
        xs = xs[rows[:, None], gather]
        xs[rows, chosen] = att.w_hat
        steps.append(
            StepCache(n, enc_cache, sel_cache, encodings, mu, chosen, gather, att)
        )
    final_encode = layers.encode_forward(params, cfg.encoder, s, xs)
    final_attend = layers.attend_forward(params, layers.encoded(final_encode))
    cache = BatchCache(bodies, tuple(steps), final_encode, final_attend)
    return final_attend.theta, cache


def backward_batch(
    params: Params,
    cfg: ModelConfig,
    cache: BatchCache,
    g_logits: np.ndarray,
) -> Params:
    """Gradient of a loss given its gradient w.r.t. the final logits.

    The hard window choice is treated as a constant; the selector receives
    gradient through the scaling of the chosen encoding by its score.
    """
    grads: Params = {k: np.zeros_like(v) for k, v in params.items()}
    s, d = cfg.window_size, cfg.d
    batch = cache.bodies.shape[0]
    rows = np.arange(batch)
    g_enc = layers.attend_backward(
        params, cache.final_attend, grads, g_logits=g_logits
    )
    g_xs = layers.encode_backward(params, cache.final_encode, g_enc, grads)
    for st in reversed(cache.steps):
        nw = st.mu.shape[1]
        g_hat = g_xs[rows, st.chosen].copy()
        g_xs[rows, st.chosen] = 0.0
        g_prev = np.zeros((batch, st.length, d), dtype=g_xs.dtype)
        g_prev[rows[:, None], st.gather] = g_xs
        g_w = layers.attend_backward(params, st.attend, grads, g_hat=g_hat)
        g_encodings = np.zeros_like(st.encodings)
        g_mu: Optional[np.ndarray] = None
        if cfg.selection == "hard":
            picked = st.encodings[rows, st.chosen]
            g_encodings[rows, st.chosen] = st.mu[rows, st.chosen][:, None] * g_w
            g_mu = np.zeros_like(st.mu)
            g_mu[rows, st.chosen] = (picked * g_w).sum(axis=1)
        elif cfg.selection == "soft":
            g_encodings = st.mu[:, :, None] * g_w[:, None, :]
            g_mu = np.einsum("bnd,bd->bn", st.encodings, g_w)
        else:
            g_encodings[rows, st.chosen] = g_w
        if g_mu is not None:
            g_scores = st.mu * (g_mu - (st.mu * g_mu).sum(axis=1, keepdims=True))
            g_encodings += layers.selector_backward(
                params, st.selector, g_scores.reshape(-1), grads
            ).reshape(batch, nw, d)
        g_windows = layers.encode_backward(
            params, st.windows, g_encodings.reshape(batch * nw, d), grads
        ).reshape(batch, nw, s, d)
        for i in range(nw):
            g_prev[:, i : i + s] += g_windows[:, i]
        g_xs = g_prev
    np.add.at(grads["E"], cache.bodies, g_xs)
    return grads


class ReductionStep(NamedTuple):
    window_scores: np.ndarray
    chosen: int
    theta: np.ndarray
    reduced: np.ndarray


class ReductionTrace(NamedTuple):
    steps: Tuple[ReductionStep, ...]
    theta: np.ndarray


def forward(
    params: Params,
    cfg: ModelConfig,
    body: Sequence[int],
    rng: Optional[np.random.Generator] = None,
) -> ReductionTrace:
    if len(body) < 2:
        raise ModelError(f"body of length {len(body)} is shorter than 2")
    theta, cache = forward_batch(params, cfg, np.asarray([list(body)]), rng)
    steps = tuple(
        ReductionStep(
            st.mu[0],
            int(st.chosen[0]),
            st.attend.theta[0],
            st.attend.w_hat[0],
        )
        for st in cache.steps
    )
    return ReductionTrace(steps, theta[0])


def reduction_steps(length: int, window_size: int) -> int:
    """Number of reductions before the final prediction."""
    if length <= window_size:
        return 0
    return -(-(length - window_size) // (window_size - 1))


def encode_window(
    params: Params, cfg: ModelConfig, window: Sequence[np.ndarray]
) -> np.ndarray:
    if len(window) != cfg.window_size:
        raise ModelError(
            f"window of length {len(window)}, expected {cfg.window_size}"
        )
    xs = np.asarray(window, dtype=params["E"].dtype)[None]
    cache = layers.encode_forward(params, cfg.encoder, cfg.window_size, xs)
    out: np.ndarray = layers.encoded(cache)[0]
    return out


def select_window(
    params: Params, windows: Sequence[np.ndarray]
) -> Tuple[np.ndarray, int]:
    if not len(windows):
        raise ModelError("no windows to select from")
    scores, _ = layers.selector_forward(params, np.asarray(windows))
    mu = layers.softmax(scores)
    return mu, int(np.argmax(mu))


def attend(params: Params, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    w = np.asarray(w, dtype=params["E"].dtype)
    if not np.all(np.isfinite(w)):
        raise ModelError("composition embedding is not finite")
    att = layers.attend_forward(params, w[None])
    return att.theta[0], att.w_hat[0]


def score_bodies(
    params: Params,
    cfg: ModelConfig,
    bodies: Sequence[Sequence[int]],
    chunk: int = 4096,
) -> np.ndarray:
    """Final theta for each body, in input order.  Bodies may differ in
    length; equal lengths are scored together."""
    out = np.empty((len(bodies), num_heads(params) + 1), dtype=params["E"].dtype)
    by_length: Dict[int, List[int]] = {}
    for i, b in enumerate(bodies):
        by_length.setdefault(len(b), []).append(i)
    for length in sorted(by_length):
        idx = by_length[length]
        for start in range(0, len(idx), chunk):
            part = idx[start : start + chunk]
            batch = np.asarray([list(bodies[i]) for i in part], dtype=np.int64)
            theta, _ = forward_batch(params, cfg, batch)
            out[part] = theta
    return out


def export_attention(
    params: Params,
    cfg: ModelConfig,
    include_null: bool = True,
) -> np.ndarray:
    """Final theta of every two-relation body, row ``i*R + j`` for body
    ``[r_i, r_j]``.  Without the null column rows are not renormalized."""
    r = num_heads(params)
    pairs = np.array([(i, j) for i in range(r) for j in range(r)], dtype=np.int64)
    theta, _ = forward_batch(params, cfg, pairs.reshape(-1, 2))
    return theta if include_null else theta[:, 1:]


def write_attention_csv(
    matrix: np.ndarray,
    relation_names: Sequence[str],
    path: str,
    include_null: bool = True,
) -> None:
    heads = (["NULL"] if include_null else []) + list(relation_names)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["body"] + heads)
        r = len(relation_names)
        for row, values in enumerate(matrix):
            body = "%s,%s" % (relation_names[row // r], relation_names[row % r])
            writer.writerow([body] + [repr(float(v)) for v in values])
    _LOGGER.info("Wrote %d attention rows to %s", len(matrix), path)

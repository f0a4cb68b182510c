"""
Batched forward and reverse passes of the building blocks.

Every ``*_backward`` accumulates parameter gradients into ``grads`` (same
keys and shapes as the parameters) and returns the gradient with respect to
its input.  Vectors are rows: a batch of ``N`` inputs of width ``d`` is an
``(N, d)`` array.
"""

import math

from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np


Params = Dict[str, np.ndarray]


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out: np.ndarray = e / e.sum(axis=axis, keepdims=True)
    return out


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    out: np.ndarray = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return out


class EncodeCache(NamedTuple):
    encoder: str
    xs: np.ndarray
    # rnn: hidden states (N, T+1, d) including h0; mlp: output (N, 1, d).
    states: np.ndarray
    # mlp only: zero-padded concatenated input (N, s*d).
    flat: Optional[np.ndarray]


def rnn_forward(p: Params, xs: np.ndarray) -> EncodeCache:
    """Single-layer tanh cell, ``h_t = tanh(W_ih x_t + W_hh h_{t-1} + b)``."""
    n, steps, d = xs.shape
    hs = np.empty((n, steps + 1, d), dtype=xs.dtype)
    hs[:, 0] = p["h0"]
    for t in range(steps):
        hs[:, t + 1] = np.tanh(
            xs[:, t] @ p["W_ih"].T + hs[:, t] @ p["W_hh"].T + p["b"]
        )
    return EncodeCache("rnn", xs, hs, None)


def rnn_backward(
    p: Params, cache: EncodeCache, g_out: np.ndarray, grads: Params
) -> np.ndarray:
    xs, hs = cache.xs, cache.states
    gxs = np.zeros_like(xs)
    gh = g_out
    for t in reversed(range(xs.shape[1])):
        ga = gh * (1.0 - hs[:, t + 1] ** 2)
        grads["W_ih"] += ga.T @ xs[:, t]
        grads["W_hh"] += ga.T @ hs[:, t]
        grads["b"] += ga.sum(axis=0)
        gxs[:, t] = ga @ p["W_ih"]
        gh = ga @ p["W_hh"]
    grads["h0"] += gh.sum(axis=0)
    return gxs


def mlp_forward(p: Params, window_size: int, xs: np.ndarray) -> EncodeCache:
    n, steps, d = xs.shape
    flat = np.zeros((n, window_size * d), dtype=xs.dtype)
    flat[:, : steps * d] = xs.reshape(n, steps * d)
    out = np.tanh(flat @ p["M_W"].T + p["M_b"])
    return EncodeCache("mlp", xs, out[:, None, :], flat)


def mlp_backward(
    p: Params, cache: EncodeCache, g_out: np.ndarray, grads: Params
) -> np.ndarray:
    assert cache.flat is not None
    n, steps, d = cache.xs.shape
    out = cache.states[:, 0]
    ga = g_out * (1.0 - out**2)
    grads["M_W"] += ga.T @ cache.flat
    grads["M_b"] += ga.sum(axis=0)
    gflat = ga @ p["M_W"]
    return gflat[:, : steps * d].reshape(n, steps, d)


def encode_forward(
    p: Params, encoder: str, window_size: int, xs: np.ndarray
) -> EncodeCache:
    if encoder == "rnn":
        return rnn_forward(p, xs)
    return mlp_forward(p, window_size, xs)


def encoded(cache: EncodeCache) -> np.ndarray:
    return cache.states[:, -1]


def encode_backward(
    p: Params, cache: EncodeCache, g_out: np.ndarray, grads: Params
) -> np.ndarray:
    if cache.encoder == "rnn":
        return rnn_backward(p, cache, g_out, grads)
    return mlp_backward(p, cache, g_out, grads)


class SelectorCache(NamedTuple):
    ws: np.ndarray
    hidden: np.ndarray


def selector_forward(p: Params, ws: np.ndarray) -> Tuple[np.ndarray, SelectorCache]:
    """Scalar score ``f(w) = w2 . tanh(W1 w + b1) + b2`` per row."""
    hidden = np.tanh(ws @ p["S_W1"].T + p["S_b1"])
    scores = hidden @ p["S_w2"] + p["S_b2"][0]
    return scores, SelectorCache(ws, hidden)


def selector_backward(
    p: Params, cache: SelectorCache, g_scores: np.ndarray, grads: Params
) -> np.ndarray:
    grads["S_w2"] += cache.hidden.T @ g_scores
    grads["S_b2"] += g_scores.sum()
    gu = np.outer(g_scores, p["S_w2"]) * (1.0 - cache.hidden**2)
    grads["S_W1"] += gu.T @ cache.ws
    grads["S_b1"] += gu.sum(axis=0)
    gws: np.ndarray = gu @ p["S_W1"]
    return gws


class AttendCache(NamedTuple):
    w: np.ndarray
    q: np.ndarray
    # Key of the null slot (the composition itself) and of every relation.
    k0: np.ndarray
    keys: np.ndarray
    # Scaled scores; theta is their softmax.
    logits: np.ndarray
    theta: np.ndarray
    w_hat: np.ndarray


def attend_forward(p: Params, w: np.ndarray) -> AttendCache:
    """Scaled dot-product attention of compositions over the head matrix.

    Row 0 of the head matrix is the composition itself (the null head), the
    remaining rows are the relation embeddings.  Values share the key
    projection.
    """
    scale = 1.0 / math.sqrt(w.shape[1])
    q = w @ p["W_Q"]
    k0 = w @ p["W_K"]
    keys = p["E"] @ p["W_K"]
    z = np.concatenate(
        [(k0 * q).sum(axis=1, keepdims=True), q @ keys.T],
        axis=1,
    )
    logits = z * scale
    theta = softmax(logits, axis=1)
    w_hat = theta[:, :1] * k0 + theta[:, 1:] @ keys
    return AttendCache(w, q, k0, keys, logits, theta, w_hat)


def attend_backward(
    p: Params,
    cache: AttendCache,
    grads: Params,
    g_logits: Optional[np.ndarray] = None,
    g_hat: Optional[np.ndarray] = None,
) -> np.ndarray:
    """``g_logits`` is the gradient w.r.t. the pre-softmax scores (after
    scaling), ``g_hat`` the gradient w.r.t. the reduced embedding."""
    w, q, k0, keys, theta = cache.w, cache.q, cache.k0, cache.keys, cache.theta
    scale = 1.0 / math.sqrt(w.shape[1])
    gz = np.zeros_like(theta) if g_logits is None else g_logits.copy()
    gk0 = np.zeros_like(k0)
    gkeys = np.zeros_like(keys)
    if g_hat is not None:
        g_theta = np.concatenate(
            [(k0 * g_hat).sum(axis=1, keepdims=True), g_hat @ keys.T],
            axis=1,
        )
        gz += theta * (g_theta - (theta * g_theta).sum(axis=1, keepdims=True))
        gk0 += theta[:, :1] * g_hat
        gkeys += theta[:, 1:].T @ g_hat
    gz *= scale
    gk0 += gz[:, :1] * q
    gq = gz[:, :1] * k0 + gz[:, 1:] @ keys
    gkeys += gz[:, 1:].T @ q
    grads["W_Q"] += w.T @ gq
    grads["W_K"] += w.T @ gk0 + p["E"].T @ gkeys
    grads["E"] += gkeys @ p["W_K"].T
    gw: np.ndarray = gq @ p["W_Q"].T + gk0 @ p["W_K"].T
    return gw

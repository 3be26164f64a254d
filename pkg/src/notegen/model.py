"""Recurrent next-token models with hand-written forward and backward passes.

Three variants share the same building blocks:

``lstm``
    LSTM -> final state -> dense softmax
``lstm_attn``
    LSTM -> attention over its states -> mean of context rows -> dense softmax
``bilstm_attn_lstm``
    Bi-LSTM -> attention -> LSTM -> final state -> dense softmax

All passes are batched over a leading window axis. Attention uses each
position's own encoder state as the query, so an input of length ``n``
produces ``n`` context rows.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import BadTarget, EmptyInput, ShapeMismatch, StaleCache, UnknownVariant
from .tensor import dropout_mask, make_rng, sigmoid, softmax
from .tokens import encode_input

GATES = ("i", "f", "o", "g")
VARIANTS = ("lstm", "lstm_attn", "bilstm_attn_lstm")


@dataclass(frozen=True)
class ModelDims:
    window: int = 100
    hidden: int = 512
    attn: int = 128
    vocab: int = 3400

    def to_dict(self):
        return asdict(self)


class ModelParams:
    """Named float64 tensors for one variant.

    ``version`` is bumped by every in-place update so caches computed against
    older weights can be detected.
    """

    def __init__(self, variant: str, dims: ModelDims, tensors: dict):
        if variant not in VARIANTS:
            raise UnknownVariant(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.dims = dims
        self.tensors = tensors
        self.version = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def lstm(self, prefix: str) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.variant, self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def bump(self):
        self.version += 1


def _shapes(variant: str, dims: ModelDims) -> dict:
    d, a, V = dims.hidden, dims.attn, dims.vocab

    def lstm(prefix, d_in):
        out = {}
        for g in GATES:
            out[f"{prefix}.W_{g}"] = (d_in, d)
        for g in GATES:
            out[f"{prefix}.U_{g}"] = (d, d)
        for g in GATES:
            out[f"{prefix}.b_{g}"] = (d,)
        return out

    if variant == "lstm":
        shapes = lstm("enc", 1)
    elif variant == "lstm_attn":
        shapes = {**lstm("enc", 1), "attn.W_a": (a, 2 * d), "attn.v_a": (a,)}
    elif variant == "bilstm_attn_lstm":
        shapes = {**lstm("fwd", 1), **lstm("bwd", 1),
                  "attn.W_a": (a, 4 * d), "attn.v_a": (a,), **lstm("dec", 2 * d)}
    else:
        raise UnknownVariant(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    shapes["head.W"] = (V, d)
    shapes["head.b"] = (V,)
    return shapes


def param_count(variant: str, dims: ModelDims) -> int:
    """Closed-form trainable parameter count."""
    d, a, V = dims.hidden, dims.attn, dims.vocab

    def lstm(d_in):
        return 4 * (d_in * d + d * d + d)

    head = V * d + V
    if variant == "lstm":
        return lstm(1) + head
    if variant == "lstm_attn":
        return lstm(1) + a * 2 * d + a + head
    if variant == "bilstm_attn_lstm":
        return 2 * lstm(1) + a * 4 * d + a + lstm(2 * d) + head
    raise UnknownVariant(f"unknown variant {variant!r}")


def build_variant(variant: str, dims: ModelDims, seed: int = 0, zero: bool = False) -> ModelParams:
    """Fresh parameters: uniform(-k, k) with k = 1/sqrt(fan_in), forget bias 1."""
    rng = make_rng(seed)
    tensors = {}
    for name, shape in _shapes(variant, dims).items():
        leaf = name.split(".")[1]
        if zero:
            arr = np.zeros(shape)
        elif leaf.startswith("b") or name == "head.b":
            arr = np.full(shape, 1.0 if leaf == "b_f" else 0.0)
        else:
            fan_in = shape[1] if name in ("attn.W_a", "head.W") else shape[0]
            k = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-k, k, shape)
        tensors[name] = arr
    return ModelParams(variant, dims, tensors)


# ---------------------------------------------------------------------------
# LSTM


def lstm_cell(x, h_prev, c_prev, p: dict):
    """One step; ``p`` maps ``W_i``..``b_g`` to arrays. Works on batched rows."""
    x, h_prev, c_prev = (np.asarray(v, dtype=np.float64) for v in (x, h_prev, c_prev))
    if x.shape[-1] != p["W_i"].shape[0] or h_prev.shape[-1] != p["U_i"].shape[0] \
            or c_prev.shape != h_prev.shape:
        raise ShapeMismatch(f"lstm_cell: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}")

    def pre(g):
        return x @ p[f"W_{g}"] + h_prev @ p[f"U_{g}"] + p[f"b_{g}"]

    i, f, o = sigmoid(pre("i")), sigmoid(pre("f")), sigmoid(pre("o"))
    g = np.tanh(pre("g"))
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def _stack(p):
    W = np.concatenate([p[f"W_{g}"] for g in GATES], axis=1)
    U = np.concatenate([p[f"U_{g}"] for g in GATES], axis=1)
    b = np.concatenate([p[f"b_{g}"] for g in GATES])
    return W, U, b


def lstm_forward(X, p: dict):
    """Run over ``X`` of shape ``(B, n, d_in)`` from zero state; returns states ``(B, n, d)``."""
    B, n, d_in = X.shape
    W, U, b = _stack(p)
    if W.shape[0] != d_in:
        raise ShapeMismatch(f"LSTM expects input dim {W.shape[0]}, got {d_in}")
    d = U.shape[0]
    XW = X @ W + b
    acts = np.empty((B, n, 4 * d))
    Hs = np.empty((B, n, d))
    Cs = np.empty((B, n, d))
    h = np.zeros((B, d))
    c = np.zeros((B, d))
    for t in range(n):
        z = XW[:, t] + h @ U
        a = acts[:, t]
        a[:, :3 * d] = sigmoid(z[:, :3 * d])
        a[:, 3 * d:] = np.tanh(z[:, 3 * d:])
        c = a[:, d:2 * d] * c + a[:, :d] * a[:, 3 * d:]
        h = a[:, 2 * d:3 * d] * np.tanh(c)
        Cs[:, t] = c
        Hs[:, t] = h
    return Hs, {"X": X, "W": W, "U": U, "acts": acts, "Hs": Hs, "Cs": Cs}


def lstm_backward(dHs, cache):
    """Backprop through time; returns ``(grads, dX)`` with per-gate grads."""
    X, W, U, acts, Hs, Cs = (cache[k] for k in ("X", "W", "U", "acts", "Hs", "Cs"))
    B, n, d = Hs.shape
    dZ = np.empty((B, n, 4 * d))
    dh_next = np.zeros((B, d))
    dc_next = np.zeros((B, d))
    for t in reversed(range(n)):
        a = acts[:, t]
        i, f, o, g = a[:, :d], a[:, d:2 * d], a[:, 2 * d:3 * d], a[:, 3 * d:]
        tc = np.tanh(Cs[:, t])
        dh = dHs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        c_prev = Cs[:, t - 1] if t else 0.0
        dz = dZ[:, t]
        dz[:, :d] = dc * g * i * (1.0 - i)
        dz[:, d:2 * d] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * d:3 * d] = dh * tc * o * (1.0 - o)
        dz[:, 3 * d:] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dz @ U.T
    Hprev = np.concatenate([np.zeros((B, 1, d)), Hs[:, :-1]], axis=1)
    flat = dZ.reshape(-1, 4 * d)
    dW = X.reshape(-1, X.shape[2]).T @ flat
    dU = Hprev.reshape(-1, d).T @ flat
    db = flat.sum(axis=0)
    grads = {}
    for k, g in enumerate(GATES):
        sl = slice(k * d, (k + 1) * d)
        grads[f"W_{g}"] = dW[:, sl]
        grads[f"U_{g}"] = dU[:, sl]
        grads[f"b_{g}"] = db[sl]
    return grads, dZ @ W.T


def bilstm_forward(X, fwd: dict, bwd: dict):
    """Row j of the result is ``[forward state j, backward state j]``."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.shape[1] < 1:
        raise EmptyInput("bilstm over an empty sequence")
    Hf, cf = lstm_forward(X, fwd)
    Hb, cb = lstm_forward(X[:, ::-1], bwd)
    H = np.concatenate([Hf, Hb[:, ::-1]], axis=2)
    return (H[0] if single else H), (cf, cb)


def bilstm_backward(dH, cache):
    cf, cb = cache
    d = cf["U"].shape[0]
    gf, dXf = lstm_backward(dH[:, :, :d], cf)
    gb, dXb = lstm_backward(dH[:, ::-1, d:], cb)
    return gf, gb, dXf + dXb[:, ::-1]


# ---------------------------------------------------------------------------
# additive attention


def attention_score(s, h, W_a, v_a) -> float:
    """``v_a . tanh(W_a [s; h])``."""
    sh = np.concatenate([np.asarray(s, dtype=np.float64), np.asarray(h, dtype=np.float64)])
    if W_a.shape[1] != sh.size or v_a.shape[0] != W_a.shape[0]:
        raise ShapeMismatch(f"score: W_a {W_a.shape}, v_a {v_a.shape}, [s;h] {sh.shape}")
    return float(v_a @ np.tanh(W_a @ sh))


def attention_weights(scores):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyInput("attention over zero positions")
    return softmax(scores)


def context_vector(alpha, H):
    alpha, H = np.asarray(alpha, dtype=np.float64), np.asarray(H, dtype=np.float64)
    if alpha.ndim != 1 or H.ndim != 2 or alpha.shape[0] != H.shape[0]:
        raise ShapeMismatch(f"context: alpha {alpha.shape}, H {H.shape}")
    return alpha @ H


def attention_layer(H, W_a, v_a):
    """Self-attention with additive scores; ``H`` is ``(n, D)`` or ``(B, n, D)``.

    Returns ``(context, cache)`` where context has the same shape as ``H``.
    """
    H = np.asarray(H, dtype=np.float64)
    single = H.ndim == 2
    if single:
        H = H[None]
    B, n, D = H.shape
    if n < 1:
        raise EmptyInput("attention over zero positions")
    if W_a.shape[1] != 2 * D or v_a.shape[0] != W_a.shape[0]:
        raise ShapeMismatch(f"attention: W_a {W_a.shape}, v_a {v_a.shape}, states {H.shape}")
    Q = H @ W_a[:, :D].T
    K = H @ W_a[:, D:].T
    T = np.tanh(Q[:, :, None, :] + K[:, None, :, :])
    A = softmax(T @ v_a, axis=-1)
    ctx = A @ H
    cache = {"H": H, "T": T, "A": A, "W_a": W_a, "v_a": v_a}
    return (ctx[0] if single else ctx), cache


def attention_backward(dctx, cache):
    """Returns ``(dW_a, dv_a, dH)``."""
    H, T, A, W_a, v_a = (cache[k] for k in ("H", "T", "A", "W_a", "v_a"))
    D = H.shape[2]
    dH = A.transpose(0, 2, 1) @ dctx
    dA = dctx @ H.transpose(0, 2, 1)
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
    dv_a = np.einsum("bij,bijk->k", dS, T)
    dpre = dS[..., None] * v_a * (1.0 - T * T)
    dQ = dpre.sum(axis=2)
    dK = dpre.sum(axis=1)
    Hf = H.reshape(-1, D)
    dWq = dQ.reshape(-1, dQ.shape[2]).T @ Hf
    dWk = dK.reshape(-1, dK.shape[2]).T @ Hf
    dH += dQ @ W_a[:, :D] + dK @ W_a[:, D:]
    return np.concatenate([dWq, dWk], axis=1), dv_a, dH


# ---------------------------------------------------------------------------
# full models


def _check_ids(window_ids, V):
    ids = np.asarray(window_ids)
    if ids.ndim not in (1, 2) or ids.shape[-1] < 1:
        raise ShapeMismatch(f"window ids must be (L,) or (B, L) with L >= 1, got {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatch("window ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise BadTarget(f"window ids must lie in [0, {V})")
    return ids


def model_forward(params: ModelParams, window_ids, mode: str = "infer",
                  rng: np.random.Generator | None = None, dropout: float = 0.0, mask=None):
    """Next-token distribution for one window ``(L,)`` or a batch ``(B, L)``.

    In ``train`` mode dropout is applied to the representation entering the
    layer after attention (after the LSTM for the plain variant), using
    ``mask`` if given or a fresh inverted-dropout mask drawn from ``rng``.
    Returns ``(probs, cache)``.
    """
    V = params.dims.vocab
    ids = _check_ids(window_ids, V)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    X = encode_input(ids, V)[..., None]
    P = params.tensors
    cache = {"params": params, "version": params.version, "variant": params.variant,
             "single": single}

    if params.variant == "bilstm_attn_lstm":
        H, cache["bilstm"] = bilstm_forward(X, params.lstm("fwd"), params.lstm("bwd"))
        rep, cache["attn"] = attention_layer(H, P["attn.W_a"], P["attn.v_a"])
    else:
        Hs, cache["enc"] = lstm_forward(X, params.lstm("enc"))
        if params.variant == "lstm":
            rep = Hs[:, -1]
        else:
            ctx, cache["attn"] = attention_layer(Hs, P["attn.W_a"], P["attn.v_a"])
            rep = ctx.mean(axis=1)

    if mode == "train":
        if mask is None:
            mask = dropout_mask(rep.shape, dropout, rng if rng is not None else make_rng(0))
        if mask.shape != rep.shape:
            raise ShapeMismatch(f"dropout mask {mask.shape} != activations {rep.shape}")
        rep = rep * mask
    elif mode != "infer":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    cache["mask"] = mask

    if params.variant == "bilstm_attn_lstm":
        Ds, cache["dec"] = lstm_forward(rep, params.lstm("dec"))
        h = Ds[:, -1]
    else:
        h = rep
    cache["h"] = h
    probs = softmax(h @ P["head.W"].T + P["head.b"])
    cache["probs"] = probs
    return (probs[0] if single else probs), cache


def model_backward(cache, target):
    """Gradients of mean categorical cross-entropy w.r.t. every parameter."""
    params = cache["params"]
    if cache.get("version") != params.version:
        raise StaleCache("parameters changed since the forward pass")
    probs = cache["probs"]
    B, V = probs.shape
    t = np.atleast_1d(np.asarray(target))
    if t.shape != (B,) or t.min() < 0 or t.max() >= V:
        raise BadTarget(f"targets must be {B} ids in [0, {V})")
    P = params.tensors
    grads = {}

    dlogits = probs.copy()
    dlogits[np.arange(B), t] -= 1.0
    dlogits /= B
    h = cache["h"]
    grads["head.W"] = dlogits.T @ h
    grads["head.b"] = dlogits.sum(axis=0)
    dh = dlogits @ P["head.W"]

    variant = cache["variant"]
    if variant == "bilstm_attn_lstm":
        dc = cache["dec"]
        dDs = np.zeros((B, dc["Hs"].shape[1], dh.shape[1]))
        dDs[:, -1] = dh
        gdec, drep = lstm_backward(dDs, dc)
        _put(grads, "dec", gdec)
    else:
        drep = dh
    if cache["mask"] is not None:
        drep = drep * cache["mask"]

    if variant == "bilstm_attn_lstm":
        dWa, dva, dH = attention_backward(drep, cache["attn"])
        grads["attn.W_a"], grads["attn.v_a"] = dWa, dva
        gf, gb, _ = bilstm_backward(dH, cache["bilstm"])
        _put(grads, "fwd", gf)
        _put(grads, "bwd", gb)
    else:
        enc = cache["enc"]
        n = enc["Hs"].shape[1]
        if variant == "lstm":
            dHs = np.zeros_like(enc["Hs"])
            dHs[:, -1] = drep
        else:
            dctx = np.repeat(drep[:, None, :] / n, n, axis=1)
            dWa, dva, dHs = attention_backward(dctx, cache["attn"])
            grads["attn.W_a"], grads["attn.v_a"] = dWa, dva
        genc, _ = lstm_backward(dHs, enc)
        _put(grads, "enc", genc)
    return {k: grads[k] for k in P}


def _put(grads, prefix, sub):
    for k, v in sub.items():
        grads[f"{prefix}.{k}"] = v


def loss_and_grads(params: ModelParams, window_ids, targets, mode="infer", **kw):
    """Mean CCE over the batch together with its gradients."""
    probs, cache = model_forward(params, window_ids, mode, **kw)
    p = np.atleast_2d(probs)
    t = np.atleast_1d(targets)
    loss = float(-np.log(np.maximum(p[np.arange(len(t)), t], 1e-12)).mean())
    return loss, model_backward(cache, targets)

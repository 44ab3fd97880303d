"""Numpy bidder networks with explicit backward passes.

Parameters live in plain ``dict[str, np.ndarray]`` maps.  Every forward
function has a matching backward that takes the upstream gradient on the
outputs and returns gradients with the same keys as the parameters.
"""

from __future__ import annotations

import numpy as np

Params = dict[str, np.ndarray]


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# -- Neural additive model ------------------------------------------------------
#
# g_k(x) = w3_k . tanh(W2_k tanh(w1_k x + b1_k) + b2_k) + b3_k, one per feature,
# bid = softplus(sum_k g_k(x_k)).


def init_nam(rng: np.random.Generator, n_features: int, hidden: int = 16) -> Params:
    return {
        "nam.w1": rng.normal(0.0, 1.0, size=(n_features, hidden)),
        "nam.b1": rng.normal(0.0, 0.5, size=(n_features, hidden)),
        "nam.w2": _glorot(rng, hidden, hidden, (n_features, hidden, hidden)),
        "nam.b2": np.zeros((n_features, hidden)),
        "nam.w3": _glorot(rng, hidden, 1, (n_features, hidden)),
        "nam.b3": np.zeros(n_features),
    }


def nam_terms(p: Params, x: np.ndarray, cache: bool = False):
    """Per-feature contributions ``g_k(x_k)``, shape (rows, F)."""
    a1 = x[:, :, None] * p["nam.w1"][None] + p["nam.b1"][None]
    h1 = np.tanh(a1)
    a2 = np.einsum("rfa,fab->rfb", h1, p["nam.w2"]) + p["nam.b2"][None]
    h2 = np.tanh(a2)
    g = np.einsum("rfb,fb->rf", h2, p["nam.w3"]) + p["nam.b3"][None]
    if cache:
        return g, (x, h1, h2)
    return g


def nam_logits(p: Params, x: np.ndarray, cache: bool = False):
    if cache:
        g, c = nam_terms(p, x, cache=True)
        return g.sum(1), c
    return nam_terms(p, x).sum(1)


def nam_logits_backward(p: Params, cache, dlogit: np.ndarray, want_input: bool = False):
    x, h1, h2 = cache
    dg = np.broadcast_to(dlogit[:, None], (len(dlogit), x.shape[1]))
    grads = {
        "nam.b3": dg.sum(0),
        "nam.w3": np.einsum("rf,rfb->fb", dg, h2),
    }
    da2 = dg[:, :, None] * p["nam.w3"][None] * (1.0 - h2**2)
    grads["nam.b2"] = da2.sum(0)
    grads["nam.w2"] = np.einsum("rfa,rfb->fab", h1, da2)
    dh1 = np.einsum("rfb,fab->rfa", da2, p["nam.w2"])
    da1 = dh1 * (1.0 - h1**2)
    grads["nam.b1"] = da1.sum(0)
    grads["nam.w1"] = np.einsum("rf,rfa->fa", x, da1)
    if want_input:
        return grads, (da1 * p["nam.w1"][None]).sum(-1)
    return grads


# -- LSTM ---------------------------------------------------------------------
#
# One shared cell; every row (one task of one agent) is its own stream.
# Gate order in the stacked weights: input, forget, candidate, output.


def init_lstm(rng: np.random.Generator, n_features: int, hidden: int = 64, head: int = 32) -> Params:
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0  # forget-gate bias
    return {
        "lstm.wx": _glorot(rng, n_features, 4 * hidden),
        "lstm.wh": _glorot(rng, hidden, 4 * hidden),
        "lstm.b": b,
        "head.w1": _glorot(rng, hidden, head),
        "head.b1": np.zeros(head),
        "head.w2": _glorot(rng, head, 1)[:, 0] * 0.1,
        "head.b2": np.zeros(1),
    }


def lstm_cell(p: Params, x: np.ndarray, h: np.ndarray, c: np.ndarray):
    H = h.shape[1]
    a = x @ p["lstm.wx"] + h @ p["lstm.wh"] + p["lstm.b"]
    gi = sigmoid(a[:, :H])
    gf = sigmoid(a[:, H : 2 * H])
    gg = np.tanh(a[:, 2 * H : 3 * H])
    go = sigmoid(a[:, 3 * H :])
    c_new = gf * c + gi * gg
    tc = np.tanh(c_new)
    h_new = go * tc
    return h_new, c_new, (x, h, c, gi, gf, gg, go, tc)


def lstm_head(p: Params, h: np.ndarray):
    z = np.tanh(h @ p["head.w1"] + p["head.b1"])
    return z @ p["head.w2"] + p["head.b2"][0], z


def lstm_sequence(p: Params, xs: np.ndarray, h0: np.ndarray | None = None, c0: np.ndarray | None = None):
    """Run ``xs`` of shape (T, rows, F) through the cell; return logits (T, rows).

    The cache returned alongside feeds ``lstm_sequence_backward``.
    """
    T, R, _ = xs.shape
    H = p["lstm.wh"].shape[0]
    h = np.zeros((R, H)) if h0 is None else h0
    c = np.zeros((R, H)) if c0 is None else c0
    logits = np.empty((T, R))
    steps = []
    for t in range(T):
        h, c, step = lstm_cell(p, xs[t], h, c)
        logits[t], z = lstm_head(p, h)
        steps.append((step, h, z))
    return logits, (steps, h, c)


def lstm_sequence_backward(p: Params, cache, dlogits: np.ndarray) -> Params:
    steps, _, _ = cache
    H = p["lstm.wh"].shape[0]
    grads = {k: np.zeros_like(v) for k, v in p.items() if k.startswith(("lstm.", "head."))}
    R = dlogits.shape[1]
    dh_next = np.zeros((R, H))
    dc_next = np.zeros((R, H))
    for t in range(len(steps) - 1, -1, -1):
        (x, h_prev, c_prev, gi, gf, gg, go, tc), h, z = steps[t]
        dy = dlogits[t]
        grads["head.b2"] += dy.sum()
        grads["head.w2"] += z.T @ dy
        dz = dy[:, None] * p["head.w2"][None, :] * (1.0 - z**2)
        grads["head.b1"] += dz.sum(0)
        grads["head.w1"] += h.T @ dz
        dh = dz @ p["head.w1"].T + dh_next
        do = dh * tc
        dc = dh * go * (1.0 - tc**2) + dc_next
        df = dc * c_prev
        di = dc * gg
        dgg = dc * gi
        dc_next = dc * gf
        da = np.concatenate(
            [di * gi * (1 - gi), df * gf * (1 - gf), dgg * (1 - gg**2), do * go * (1 - go)], axis=1
        )
        grads["lstm.b"] += da.sum(0)
        grads["lstm.wx"] += x.T @ da
        grads["lstm.wh"] += h_prev.T @ da
        dh_next = da @ p["lstm.wh"].T
    return grads


# -- plain MLP (critic) -------------------------------------------------------


def init_mlp(rng: np.random.Generator, sizes: list[int], prefix: str = "mlp") -> Params:
    p = {}
    for n, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        p[f"{prefix}.w{n}"] = _glorot(rng, a, b)
        p[f"{prefix}.b{n}"] = np.zeros(b)
    return p


def _n_layers(p: Params, prefix: str) -> int:
    return sum(1 for k in p if k.startswith(f"{prefix}.w"))


def mlp_forward(p: Params, x: np.ndarray, prefix: str = "mlp", cache: bool = False):
    """tanh hidden layers, linear scalar output; returns shape (rows,)."""
    L = _n_layers(p, prefix)
    acts = [x]
    h = x
    for n in range(L):
        h = h @ p[f"{prefix}.w{n}"] + p[f"{prefix}.b{n}"]
        if n < L - 1:
            h = np.tanh(h)
        acts.append(h)
    out = h[:, 0]
    return (out, acts) if cache else out


def mlp_backward(p: Params, acts, dout: np.ndarray, prefix: str = "mlp") -> Params:
    L = _n_layers(p, prefix)
    grads = {}
    d = dout[:, None]
    for n in range(L - 1, -1, -1):
        grads[f"{prefix}.w{n}"] = acts[n].T @ d
        grads[f"{prefix}.b{n}"] = d.sum(0)
        if n > 0:
            d = (d @ p[f"{prefix}.w{n}"].T) * (1.0 - acts[n] ** 2)
    return grads

"""Minimal neural-network machinery built on numpy.

Two networks live here: the per-courier value network (location embedding
-> LSTM over the queue -> dense head -> scalar) and a plain MLP used by
the accept/reject baseline. Backward passes are hand-written; float64
throughout so analytic gradients can be checked against finite
differences.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _uniform_init(rng, fan_in, shape):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Adam:
    """Adaptive-moment SGD over a named parameter dict."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / b1t
            vhat = self.v[name] / b2t
            params[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class ValueNet:
    """Post-decision value network: embedding + LSTM queue encoder + dense head.

    Inputs arrive packed as float rows:
    ``[qlen, dest_ids*queue_max, slacks*queue_max, ret, until_shift_end,
    at_depot, time_frac, aux*4]``
    """

    STATIC_DIM = 8

    def __init__(
        self,
        n_locations: int,
        queue_max: int,
        d_embed: int = 8,
        lstm_hidden: int = 32,
        head_sizes: tuple[int, ...] = (64, 32),
        seed: int = 0,
    ):
        self.arch = {
            "n_locations": int(n_locations),
            "queue_max": int(queue_max),
            "d_embed": int(d_embed),
            "lstm_hidden": int(lstm_hidden),
            "head_sizes": [int(h) for h in head_sizes],
        }
        rng = np.random.default_rng(seed)
        d_in = d_embed + 1
        h = lstm_hidden
        p: dict[str, np.ndarray] = {}
        p["emb"] = rng.normal(0.0, 0.1, size=(n_locations, d_embed))
        p["lstm_wx"] = _uniform_init(rng, d_in, (d_in, 4 * h))
        p["lstm_wh"] = _uniform_init(rng, h, (h, 4 * h))
        p["lstm_b"] = np.zeros(4 * h)
        p["lstm_b"][h: 2 * h] = 1.0  # forget-gate bias
        sizes = [h + self.STATIC_DIM, *head_sizes, 1]
        for k in range(len(sizes) - 1):
            p[f"w{k}"] = _uniform_init(rng, sizes[k], (sizes[k], sizes[k + 1]))
            p[f"b{k}"] = np.zeros(sizes[k + 1])
        self.params = p

    @property
    def feature_dim(self) -> int:
        return 1 + 2 * self.arch["queue_max"] + self.STATIC_DIM

    @property
    def n_head_layers(self) -> int:
        return len(self.arch["head_sizes"]) + 1

    def forward(self, packed: np.ndarray, want_cache: bool = False):
        """Values for a batch of packed feature rows; optionally keep the tape."""
        x = np.asarray(packed, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {x.shape[1]}")
        qmax = self.arch["queue_max"]
        h_dim = self.arch["lstm_hidden"]
        p = self.params
        B = x.shape[0]

        qlen = x[:, 0]
        ids = np.clip(x[:, 1: 1 + qmax].astype(int), 0, self.arch["n_locations"] - 1)
        slacks = x[:, 1 + qmax: 1 + 2 * qmax]
        static = x[:, 1 + 2 * qmax:]

        h = np.zeros((B, h_dim))
        c = np.zeros((B, h_dim))
        steps = []
        for tau in range(qmax):
            m = (qlen > tau).astype(float)[:, None]
            emb = p["emb"][ids[:, tau]]
            xt = np.concatenate([emb, slacks[:, tau: tau + 1]], axis=1)
            z = xt @ p["lstm_wx"] + h @ p["lstm_wh"] + p["lstm_b"]
            i = _sigmoid(z[:, :h_dim])
            f = _sigmoid(z[:, h_dim: 2 * h_dim])
            g = np.tanh(z[:, 2 * h_dim: 3 * h_dim])
            o = _sigmoid(z[:, 3 * h_dim:])
            c_new = f * c + i * g
            h_new = o * np.tanh(c_new)
            h_next = m * h_new + (1.0 - m) * h
            c_next = m * c_new + (1.0 - m) * c
            if want_cache:
                steps.append((m, xt, h, c, i, f, g, o, c_new))
            h, c = h_next, c_next

        acts = [np.concatenate([h, static], axis=1)]
        for k in range(self.n_head_layers):
            z = acts[-1] @ p[f"w{k}"] + p[f"b{k}"]
            if k < self.n_head_layers - 1:
                z = np.maximum(z, 0.0)
            acts.append(z)
        values = acts[-1][:, 0]
        if not want_cache:
            return values
        cache = {"ids": ids, "steps": steps, "acts": acts, "B": B}
        return values, cache

    def backward(self, cache, dvalues: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of sum(dvalues * values) w.r.t. every parameter."""
        qmax = self.arch["queue_max"]
        h_dim = self.arch["lstm_hidden"]
        p = self.params
        grads = {name: np.zeros_like(arr) for name, arr in p.items()}
        acts = cache["acts"]

        d = np.asarray(dvalues, dtype=float)[:, None]
        for k in range(self.n_head_layers - 1, -1, -1):
            a_prev = acts[k]
            if k < self.n_head_layers - 1:
                # d arrives w.r.t. the relu output of layer k
                d = d * (acts[k + 1] > 0.0)
            grads[f"w{k}"] += a_prev.T @ d
            grads[f"b{k}"] += d.sum(axis=0)
            d = d @ p[f"w{k}"].T

        dh = d[:, :h_dim]
        dc = np.zeros_like(dh)
        for tau in range(qmax - 1, -1, -1):
            m, xt, h_prev, c_prev, i, f, g, o, c_new = cache["steps"][tau]
            dh_new = m * dh
            dh_carry = (1.0 - m) * dh
            tanh_c = np.tanh(c_new)
            dc_new = m * dc + dh_new * o * (1.0 - tanh_c**2)
            dc_carry = (1.0 - m) * dc
            do = dh_new * tanh_c
            di = dc_new * g
            df = dc_new * c_prev
            dg = dc_new * i
            dz = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g**2),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            grads["lstm_wx"] += xt.T @ dz
            grads["lstm_wh"] += h_prev.T @ dz
            grads["lstm_b"] += dz.sum(axis=0)
            dxt = dz @ p["lstm_wx"].T
            np.add.at(grads["emb"], cache["ids"][:, tau], dxt[:, :-1])
            dh = dz @ p["lstm_wh"].T + dh_carry
            dc = dc_new * f + dc_carry
        return grads

    def clone(self) -> "ValueNet":
        other = ValueNet.__new__(ValueNet)
        other.arch = dict(self.arch)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


class QNet:
    """Feed-forward Q-network with relu hidden layers and a linear output."""

    def __init__(self, input_dim: int, hidden: tuple[int, ...], n_actions: int = 2, seed: int = 0):
        self.arch = {
            "input_dim": int(input_dim),
            "hidden": [int(h) for h in hidden],
            "n_actions": int(n_actions),
        }
        rng = np.random.default_rng(seed)
        sizes = [input_dim, *hidden, n_actions]
        self.params = {}
        for k in range(len(sizes) - 1):
            self.params[f"w{k}"] = _uniform_init(rng, sizes[k], (sizes[k], sizes[k + 1]))
            self.params[f"b{k}"] = np.zeros(sizes[k + 1])
        self.n_layers = len(sizes) - 1

    def forward(self, x: np.ndarray, want_cache: bool = False):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        acts = [x]
        for k in range(self.n_layers):
            z = acts[-1] @ self.params[f"w{k}"] + self.params[f"b{k}"]
            if k < self.n_layers - 1:
                z = np.maximum(z, 0.0)
            acts.append(z)
        if not want_cache:
            return acts[-1]
        return acts[-1], {"acts": acts}

    def backward(self, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
        acts = cache["acts"]
        grads = {}
        d = np.asarray(dout, dtype=float)
        for k in range(self.n_layers - 1, -1, -1):
            if k < self.n_layers - 1:
                d = d * (acts[k + 1] > 0.0)
            grads[f"w{k}"] = acts[k].T @ d
            grads[f"b{k}"] = d.sum(axis=0)
            d = d @ self.params[f"w{k}"].T
        return grads

    def clone(self) -> "QNet":
        other = QNet.__new__(QNet)
        other.arch = dict(self.arch)
        other.n_layers = self.n_layers
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


def perturb_params(net, sigma: float, seed: int):
    """Copy of the network with N(0, sigma^2) noise on every parameter."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    out = net.clone()
    if sigma == 0.0:
        return out
    rng = np.random.default_rng(seed)
    for name in sorted(out.params):
        out.params[name] = out.params[name] + rng.normal(0.0, sigma, size=out.params[name].shape)
    return out


def sync_params(src, dst, mode: str = "hard", tau: float = 1.0) -> None:
    """Copy (hard) or Polyak-average (soft) source parameters into dst."""
    if src.arch != dst.arch:
        raise ValueError(f"architecture mismatch: {src.arch} vs {dst.arch}")
    for name, arr in src.params.items():
        if mode == "hard":
            dst.params[name] = arr.copy()
        elif mode == "polyak":
            dst.params[name] = tau * arr + (1.0 - tau) * dst.params[name]
        else:
            raise ValueError(f"unknown sync mode {mode!r}")


def params_hash(net) -> str:
    digest = hashlib.sha256()
    for name in sorted(net.params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(net.params[name]).tobytes())
    return digest.hexdigest()


def save_checkpoint(path, net, kind: str, meta: dict | None = None) -> None:
    """Versioned JSON tensor dump with an architecture header."""
    payload = {
        "format_version": 1,
        "kind": kind,
        "arch": net.arch,
        "meta": meta or {},
        "params": {k: v.tolist() for k, v in net.params.items()},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, expected_kind: str):
    """Load a checkpoint; the kind and architecture must match what the caller builds."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    if payload.get("kind") != expected_kind:
        raise ValueError(f"{path}: checkpoint kind {payload.get('kind')!r}, expected {expected_kind!r}")
    return payload


def restore_value_net(payload) -> ValueNet:
    arch = payload["arch"]
    net = ValueNet(
        arch["n_locations"],
        arch["queue_max"],
        arch["d_embed"],
        arch["lstm_hidden"],
        tuple(arch["head_sizes"]),
    )
    _restore_params(net, payload)
    return net


def restore_qnet(payload) -> QNet:
    arch = payload["arch"]
    net = QNet(arch["input_dim"], tuple(arch["hidden"]), arch["n_actions"])
    _restore_params(net, payload)
    return net


def _restore_params(net, payload) -> None:
    if payload["arch"] != net.arch:
        raise ValueError(f"checkpoint architecture {payload['arch']} != constructed {net.arch}")
    saved = payload["params"]
    if set(saved) != set(net.params):
        raise ValueError("checkpoint parameter names do not match the architecture")
    for name, arr in saved.items():
        loaded = np.asarray(arr, dtype=float)
        if loaded.shape != net.params[name].shape:
            raise ValueError(f"checkpoint tensor {name} has shape {loaded.shape}, expected {net.params[name].shape}")
        net.params[name] = loaded

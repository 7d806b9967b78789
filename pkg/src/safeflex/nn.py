"""Small feed-forward networks with hand-written backprop and Adam.

Only what the actor-critic learner needs: dense layers, a handful of
activations, batched forward/backward, soft target updates and a JSON weight
format.  Shapes follow the row-major convention ``y = x @ W + b``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _act_grad(name: str, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(z)


class Mlp:
    """Dense network.

    ``out_act`` is either one activation for every output unit or a list with
    one entry per unit (the actor squashes its two outputs differently).
    """

    def __init__(
        self,
        sizes: Sequence[int],
        hidden_act: str = "relu",
        out_act: str | Sequence[str] = "identity",
        rng: np.random.Generator | None = None,
        out_init_scale: float | None = None,
    ):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if hidden_act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {hidden_act}")
        self.sizes = [int(s) for s in sizes]
        self.hidden_act = hidden_act
        if isinstance(out_act, str):
            out_act = [out_act] * self.sizes[-1]
        if len(out_act) != self.sizes[-1] or any(a not in ACTIVATIONS for a in out_act):
            raise ValueError("bad output activations")
        self.out_act = list(out_act)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            if i == n_layers - 1 and out_init_scale is not None:
                bound = out_init_scale
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
        self._cache: tuple[np.ndarray, list, list] | None = None
        self._uniform_out = len(set(self.out_act)) == 1

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def _out(self, z: np.ndarray) -> np.ndarray:
        if self._uniform_out:
            return _act(self.out_act[0], z)
        return np.stack([_act(a, z[..., j]) for j, a in enumerate(self.out_act)], axis=-1)

    def _out_grad(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self._uniform_out:
            return _act_grad(self.out_act[0], z, y)
        return np.stack([_act_grad(a, z[..., j], y[..., j]) for j, a in enumerate(self.out_act)], axis=-1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected input width {self.n_in}, got {x.shape[-1]}")
        pre, post = [], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = self._out(z) if i == last else _act(self.hidden_act, z)
            pre.append(z)
            post.append(h)
        self._cache = (x, pre, post)
        return h

    __call__ = forward

    @property
    def last_pre_activation(self) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("no forward pass cached")
        return self._cache[1][-1]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass that leaves the backprop cache untouched."""
        h = np.asarray(x, dtype=float)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = self._out(z) if i == last else _act(self.hidden_act, z)
        return h

    def backward(
        self, x: np.ndarray, grad_out: np.ndarray, grad_pre_out: np.ndarray | None = None
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients w.r.t. parameters (same order as :meth:`parameters`) and input.

        ``grad_out`` is dL/dy for the batch evaluated by the last :meth:`forward`;
        ``grad_pre_out`` optionally adds a loss gradient taken directly on the
        output pre-activations (used to keep squashed outputs out of saturation).
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cx, pre, post = self._cache
        if cx is not x and not (cx.shape == np.shape(x) and np.array_equal(cx, x)):
            raise RuntimeError("stale forward cache: backward input differs from the last forward input")
        g = np.asarray(grad_out, dtype=float)
        last = len(self.weights) - 1
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for i in range(last, -1, -1):
            z, y = pre[i], post[i]
            if i == last:
                g = g * self._out_grad(z, y)
                if grad_pre_out is not None:
                    g = g + grad_pre_out
            else:
                g = g * _act_grad(self.hidden_act, z, y)
            h_in = cx if i == 0 else post[i - 1]
            if g.ndim == 1:
                grads[2 * i] = np.outer(h_in, g)
                grads[2 * i + 1] = g.copy()
            else:
                grads[2 * i] = h_in.T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g

    def copy(self) -> Mlp:
        new = Mlp.__new__(Mlp)
        new.sizes = list(self.sizes)
        new.hidden_act = self.hidden_act
        new.out_act = list(self.out_act)
        new._uniform_out = self._uniform_out
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        new._cache = None
        return new

    def to_dict(self) -> dict:
        return {
            "format": "safeflex-mlp",
            "version": FORMAT_VERSION,
            "sizes": self.sizes,
            "hidden_act": self.hidden_act,
            "out_act": self.out_act,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> Mlp:
        if doc.get("format") != "safeflex-mlp":
            raise ValueError("not a safeflex weight file")
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported weight file version {doc.get('version')}")
        net = cls.__new__(cls)
        net.sizes = [int(s) for s in doc["sizes"]]
        net.hidden_act = doc["hidden_act"]
        net.out_act = list(doc["out_act"])
        net._uniform_out = len(set(net.out_act)) == 1
        net.weights = [np.array(w, dtype=float).reshape(a, b) for w, a, b in zip(doc["weights"], net.sizes[:-1], net.sizes[1:])]
        net.biases = [np.array(b, dtype=float) for b in doc["biases"]]
        net._cache = None
        return net

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> Mlp:
        return cls.from_dict(json.loads(Path(path).read_text()))


class Adam:
    """Adaptive-moment optimiser over a fixed list of parameter arrays (updated in place)."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        eps_hat = self.eps * np.sqrt(1.0 - b2**self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= step * m / (np.sqrt(v) + eps_hat)

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr, "m": [m.tolist() for m in self.m], "v": [v.tolist() for v in self.v]}

    def load_state_dict(self, doc: dict) -> None:
        self.t = int(doc["t"])
        self.lr = float(doc["lr"])
        self.m = [np.array(m, dtype=float).reshape(p.shape) for m, p in zip(doc["m"], self.params)]
        self.v = [np.array(v, dtype=float).reshape(p.shape) for v, p in zip(doc["v"], self.params)]


def adam_step(opt: Adam, grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    opt.step(grads)
    return opt.params


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Rescale a gradient list so its global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total <= max_norm or total == 0.0:
        return list(grads)
    return [g * (max_norm / total) for g in grads]


def soft_update(target: Sequence[np.ndarray], online: Sequence[np.ndarray], tau: float) -> None:
    """``target <- tau * online + (1 - tau) * target``, in place."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    if len(target) != len(online):
        raise ValueError("parameter lists differ in length")
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {o.shape}")
        t *= 1.0 - tau
        t += tau * o

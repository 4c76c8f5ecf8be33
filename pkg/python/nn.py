"""
Small numpy network blocks with hand-written backward passes.

Every block caches what its backward pass needs during forward; call forward, then backward once.
Gradients accumulate into `grads` until zero_grad().
"""
import math
from typing import Iterator, Optional, Sequence

import numpy as np


def orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = math.sqrt(2.0)) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = np.asarray(value, dtype=float)
        self.grads[name] = np.zeros_like(self.params[name])
        return self.params[name]

    def add_child(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.params.items():
            yield prefix + name, value
        for child_name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def named_gradients(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.grads.items():
            yield prefix + name, value
        for child_name, child in self.children.items():
            yield from child.named_gradients(f"{prefix}{child_name}.")

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def gradients(self) -> dict[str, np.ndarray]:
        return dict(self.named_gradients())

    def zero_grad(self):
        for _, grad in self.named_gradients():
            grad[...] = 0.0

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def load_parameters(self, values: dict[str, np.ndarray], strict: bool = True):
        own = self.parameters()
        if strict and set(own) != set(values):
            missing = sorted(set(own) - set(values))
            extra = sorted(set(values) - set(own))
            raise KeyError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, target in own.items():
            if name not in values:
                continue
            value = np.asarray(values[name], dtype=float)
            if value.shape != target.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {target.shape}")
            target[...] = value


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: Optional[np.random.Generator] = None,
                 gain: float = math.sqrt(2.0)):
        super().__init__()
        weight = orthogonal(rng, fan_in, fan_out, gain) if rng is not None else np.zeros((fan_in, fan_out))
        self.add_param("weight", weight)
        self.add_param("bias", np.zeros(fan_out))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self._x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.grads["weight"] += x2.T @ dy2
        self.grads["bias"] += dy2.sum(axis=0)
        return dy @ self.params["weight"].T


class MLP(Module):
    """ELU between layers; `activate_output` also applies it after the last layer."""

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None, activate_output=True,
                 output_gain: float = math.sqrt(2.0)):
        super().__init__()
        self.sizes = tuple(sizes)
        self.activate_output = activate_output
        self.layers = []
        for i in range(len(sizes) - 1):
            gain = output_gain if i == len(sizes) - 2 else math.sqrt(2.0)
            self.layers.append(self.add_child(str(i), Linear(sizes[i], sizes[i + 1], rng, gain)))
        self._pre = []

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._pre = []
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if i < len(self.layers) - 1 or self.activate_output:
                self._pre.append(x)
                x = elu(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for i in reversed(range(len(self.layers))):
            if i < len(self.layers) - 1 or self.activate_output:
                dy = dy * elu_grad(self._pre[i])
            dy = self.layers[i].backward(dy)
        return dy


class GRUCell(Module):
    """
    h' = (1 - z) * n + z * h with
    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br), n = tanh(x Wn + r * (h Un) + bn).
    Gate blocks are stacked (z, r, n) along the last axis of wx, wh and b.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        h = hidden_size
        if rng is not None:
            wx = np.concatenate([orthogonal(rng, input_size, h, 1.0) for _ in range(3)], axis=1)
            wh = np.concatenate([orthogonal(rng, h, h, 1.0) for _ in range(3)], axis=1)
        else:
            wx, wh = np.zeros((input_size, 3 * h)), np.zeros((h, 3 * h))
        self.add_param("wx", wx)
        self.add_param("wh", wh)
        self.add_param("b", np.zeros(3 * h))
        self._cache = []

    def step(self, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        """Single step without caching, for acting."""
        return self._step(x, h)[0]

    def _step(self, x, h):
        hs = self.hidden_size
        gx = x @ self.params["wx"] + self.params["b"]
        gh = h @ self.params["wh"]
        z = sigmoid(gx[:, :hs] + gh[:, :hs])
        r = sigmoid(gx[:, hs:2 * hs] + gh[:, hs:2 * hs])
        hn = gh[:, 2 * hs:]
        n = np.tanh(gx[:, 2 * hs:] + r * hn)
        return (1.0 - z) * n + z * h, (x, h, z, r, n, hn)

    def forward_sequence(self, xs: np.ndarray, h0: np.ndarray, resets: Optional[np.ndarray] = None) -> np.ndarray:
        """
        xs: (T, N, D), h0: (N, H). resets[t] zeroes the incoming hidden state of step t (episode start).
        Returns hidden states after every step, (T, N, H).
        """
        steps = xs.shape[0]
        keep = np.ones(xs.shape[:2]) if resets is None else 1.0 - np.asarray(resets, dtype=float)
        self._cache = []
        self._keep = keep
        out = np.empty((steps, xs.shape[1], self.hidden_size))
        h = h0
        for t in range(steps):
            h, cache = self._step(xs[t], h * keep[t][:, None])
            self._cache.append(cache)
            out[t] = h
        return out

    def backward_sequence(self, dhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """dhs: loss gradient w.r.t. every output hidden state. Returns (dxs, dh0)."""
        hs = self.hidden_size
        wx, wh = self.params["wx"], self.params["wh"]
        dxs = np.empty((len(self._cache),) + self._cache[0][0].shape)
        carry = np.zeros_like(dhs[0])
        for t in reversed(range(len(self._cache))):
            x, h, z, r, n, hn = self._cache[t]
            dh_out = dhs[t] + carry
            dn = dh_out * (1.0 - z)
            dz = dh_out * (h - n)
            dh = dh_out * z
            dn_pre = dn * (1.0 - n * n)
            dr = dn_pre * hn
            dhn = dn_pre * r
            dz_pre = dz * z * (1.0 - z)
            dr_pre = dr * r * (1.0 - r)
            dgx = np.concatenate([dz_pre, dr_pre, dn_pre], axis=1)
            dgh = np.concatenate([dz_pre, dr_pre, dhn], axis=1)
            self.grads["wx"] += x.T @ dgx
            self.grads["wh"] += h.T @ dgh
            self.grads["b"] += dgx.sum(axis=0)
            dxs[t] = dgx @ wx.T
            dh = dh + dgh @ wh.T
            carry = dh * self._keep[t][:, None]
        return dxs, carry


class Adam:
    """Adam over a flat name -> array parameter dict, updating in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.lr_scale = 1.0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: Optional[float] = None):
        lr = (self.lr if lr is None else lr) * self.lr_scale
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array([float(self.t)])
        out["adam.lr_scale"] = np.array([self.lr_scale])
        return out

    def load_state(self, values: dict[str, np.ndarray]):
        for name in self.params:
            self.m[name] = np.array(values[f"adam.m.{name}"], dtype=float).reshape(self.params[name].shape)
            self.v[name] = np.array(values[f"adam.v.{name}"], dtype=float).reshape(self.params[name].shape)
        self.t = int(values["adam.t"][0])
        self.lr_scale = float(values.get("adam.lr_scale", [1.0])[0])


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total

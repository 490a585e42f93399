"""Small numpy neural toolkit: fully connected nets, Adam, replay memory, target sync."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError

ACTIVATIONS = ("identity", "tanh")


class Mlp:
    """Fully connected network with rectifier hidden layers.

    Parameters are stored as a flat list ``[W0, b0, W1, b1, ...]`` with
    ``W_k`` of shape ``(fan_in, fan_out)`` so a batch ``x`` of shape
    ``(B, fan_in)`` maps to ``x @ W_k + b_k``.
    """

    def __init__(self, sizes, out_activation: str = "identity", rng=None,
                 dtype=np.float64):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValidationError(f"invalid layer sizes {sizes}")
        if out_activation not in ACTIVATIONS:
            raise ValidationError(f"unknown output activation {out_activation!r}")
        self.sizes = sizes
        self.out_activation = out_activation
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(rng)
        self.params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(self.dtype))
            self.params.append(rng.uniform(-bound, bound, fan_out).astype(self.dtype))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValidationError(f"expected input of width {self.sizes[0]}, got shape {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        h = self._check_input(x)
        last = self.n_layers - 1
        for k in range(self.n_layers):
            h = h @ self.params[2 * k] + self.params[2 * k + 1]
            if k < last:
                np.maximum(h, 0.0, out=h)
        return np.tanh(h) if self.out_activation == "tanh" else h

    __call__ = forward

    def forward_train(self, x):
        """Forward pass that also returns the activations needed by :meth:`backward`."""
        h = self._check_input(x)
        acts = [h]
        last = self.n_layers - 1
        for k in range(self.n_layers):
            h = h @ self.params[2 * k] + self.params[2 * k + 1]
            if k < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        out = np.tanh(h) if self.out_activation == "tanh" else h
        return out, (acts, out)

    def backward(self, cache, grad_out, param_grads: bool = True):
        """Gradients of ``sum(grad_out * output)`` w.r.t. parameters and input.

        Returns ``(param_grads, input_grad)``; ``param_grads`` is None when
        only the input gradient is requested.
        """
        acts, out = cache
        g = np.asarray(grad_out, dtype=self.dtype)
        if g.shape != out.shape:
            raise ValidationError(f"upstream gradient shape {g.shape} != output shape {out.shape}")
        if self.out_activation == "tanh":
            g = g * (1.0 - out * out)
        grads = [None] * len(self.params) if param_grads else None
        for k in range(self.n_layers - 1, -1, -1):
            if param_grads:
                grads[2 * k] = acts[k].T @ g
                grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.params[2 * k].T
            if k > 0:
                g = g * (acts[k] > 0)
        return grads, g

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.sizes = list(self.sizes)
        clone.out_activation = self.out_activation
        clone.dtype = self.dtype
        clone.params = [p.copy() for p in self.params]
        return clone

    def same_architecture(self, other: "Mlp") -> bool:
        return self.sizes == other.sizes and self.out_activation == other.out_activation


def learning_rate(base: float, decay: float, episode: int) -> float:
    """Inverse-time schedule ``base / (1 + decay * episode)``."""
    return base / (1.0 + decay * episode)


class Adam:
    """Bias-corrected Adam acting in place on a list of parameter arrays."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr: float | None = None) -> None:
        self.t += 1
        adam_step(self.params, grads, self.m, self.v, self.t,
                  self.lr if lr is None else lr, self.beta1, self.beta2, self.eps)


def adam_step(params, grads, m, v, t: int, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    if t < 1:
        raise ValidationError("Adam step counter starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, mk, vk in zip(params, grads, m, v):
        mk *= beta1
        mk += (1.0 - beta1) * g
        vk *= beta2
        vk += (1.0 - beta2) * (g * g)
        p -= lr * (mk / c1) / (np.sqrt(vk / c2) + eps)


def sync_target(target: Mlp, online: Mlp, mode: str = "hard", delta: float = 0.005) -> None:
    """Hard copy, or soft blend ``target <- delta * online + (1 - delta) * target``."""
    if not target.same_architecture(online):
        raise ValidationError("target and online networks differ in architecture")
    if mode == "hard":
        for tp, op in zip(target.params, online.params):
            tp[...] = op
    elif mode == "soft":
        for tp, op in zip(target.params, online.params):
            tp *= 1.0 - delta
            tp += delta * op
    else:
        raise ValidationError(f"unknown sync mode {mode!r}")


class ReplayMemory:
    """Fixed-capacity ring buffer of transitions with named, fixed-shape fields."""

    def __init__(self, capacity: int, fields: dict):
        if capacity < 1:
            raise ValidationError("capacity must be positive")
        self.capacity = capacity
        self._data = {name: np.zeros((capacity,) + tuple(shape), dtype=dtype)
                      for name, (shape, dtype) in fields.items()}
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, **values) -> None:
        if set(values) != set(self._data):
            raise ValidationError(f"transition fields {sorted(values)} != {sorted(self._data)}")
        for name, val in values.items():
            self._data[name][self._next] = val
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator) -> dict:
        """Uniform batch of distinct stored transitions."""
        if batch > self._size:
            raise ValidationError(f"cannot sample {batch} from {self._size} transitions")
        idx = rng.choice(self._size, size=batch, replace=False)
        return {name: arr[idx] for name, arr in self._data.items()}

    def oldest(self) -> dict:
        i = self._next if self._size == self.capacity else 0
        return {name: arr[i] for name, arr in self._data.items()}


def save_checkpoint(net: Mlp, path) -> None:
    """Raw little-endian float64 weights (W0 row-major, b0, W1, b1, ...) plus a JSON header."""
    path = Path(path)
    flat = np.concatenate([p.astype("<f8").ravel() for p in net.params])
    flat.tofile(path)
    header = {"format": "remsched-mlp-v1", "sizes": net.sizes,
              "out_activation": net.out_activation, "dtype": "float64-le",
              "order": "W0,b0,W1,b1,... row-major, W_k shape (fan_in, fan_out)"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2))


def load_checkpoint(path) -> Mlp:
    path = Path(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    net = Mlp(header["sizes"], header["out_activation"])
    flat = np.fromfile(path, dtype="<f8")
    if flat.size != net.n_params:
        raise ValidationError(f"checkpoint holds {flat.size} values, expected {net.n_params}")
    pos = 0
    for p in net.params:
        p[...] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return net

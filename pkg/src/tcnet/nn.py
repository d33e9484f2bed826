"""Parameter containers and the few layers the models are built from."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, ops


class Module:
    """Holds named learnable tensors, fixed buffers and child modules.

    Parameter names are dotted paths (``"head0.trunk.weight"``) so a flat
    ``{name: array}`` mapping fully describes a model for checkpointing.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        arr = np.array(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{cname}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for cname, child in self._children.items():
            out.update(child.named_buffers(f"{prefix}{cname}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and buffers (buffers under a ``buffer:`` prefix)."""
        state = {k: v.data for k, v in self.named_parameters().items()}
        state.update({f"buffer:{k}": v for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        expected = set(params) | {f"buffer:{k}" for k in buffers}
        missing, unexpected = expected - set(state), set(state) - expected
        if missing or unexpected:
            raise ValueError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}"
            )
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"state mismatch: {name} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.copy()
        for name, buf in buffers.items():
            arr = np.asarray(state[f"buffer:{name}"], dtype=np.float64)
            if arr.shape != buf.shape:
                raise ValueError(f"state mismatch: buffer {name} has shape {arr.shape}, expected {buf.shape}")
            buf[...] = arr

    def zero_weights(self) -> None:
        """Set every weight matrix (not biases) to zero; used for degenerate checks."""
        for name, p in self.named_parameters().items():
            if name.endswith("weight"):
                p.data[...] = 0.0


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    """y = x @ weight + bias over the last axis."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.add_param("weight", glorot(rng, n_in, n_out, (n_in, n_out)))
        self.bias = self.add_param("bias", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"linear: expected last axis {self.n_in}, got shape {x.shape}")
        lead = x.shape[:-1]
        flat = ops.reshape(x, (int(np.prod(lead, dtype=int)), self.n_in))
        return ops.reshape(ops.matmul(flat, self.weight) + self.bias, lead + (self.n_out,))


class MLP(Module):
    """Linear -> tanh -> Linear."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.first = self.add_child("first", Linear(n_in, n_hidden, rng))
        self.second = self.add_child("second", Linear(n_hidden, n_out, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(ops.tanh(self.first(x)))


class Conv1d(Module):
    """Cross-channel convolution over the last axis with 'same' zero padding."""

    def __init__(self, n_in: int, n_out: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        self.kernel = kernel
        self.weight = self.add_param("weight", glorot(rng, n_in * kernel, n_out * kernel, (n_out, n_in, kernel)))
        self.bias = self.add_param("bias", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        left = (self.kernel - 1) // 2
        padded = ops.pad(x, left, self.kernel - 1 - left)
        out = ops.conv1d(padded, self.weight)
        return out + ops.reshape(self.bias, (self.bias.shape[0], 1))


class ScoreAttention(Module):
    """Softmax over an axis of learned linear scores w.v + b; returns (pooled, weights).

    ``axis`` indexes the leading (non-feature) axes of ``x``.
    """

    def __init__(self, width: int, rng: np.random.Generator):
        super().__init__()
        self.score = self.add_child("score", Linear(width, 1, rng))

    def __call__(self, x: Tensor, axis: int) -> tuple[Tensor, Tensor]:
        scores = ops.reshape(self.score(x), x.shape[:-1])
        weights = ops.softmax(scores, axis=axis)
        w = ops.reshape(weights, weights.shape + (1,))
        return ops.sum(w * x, axis=axis if axis >= 0 else axis - 1), weights

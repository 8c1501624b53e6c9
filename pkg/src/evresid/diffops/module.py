"""Parameters and a tiny module tree for naming/freezing them."""
from __future__ import annotations

import numpy as np

from .nn import conv2d, gru_cell
from .tensor import Tensor


class Parameter(Tensor):
    """A named leaf tensor. ``trainable=False`` freezes it: no gradient, no update."""

    __slots__ = ("trainable",)

    def __init__(self, data, name="", trainable=True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=trainable, name=name)
        self.trainable = bool(trainable)

    def set_trainable(self, flag):
        self.trainable = bool(flag)
        self.requires_grad = self.trainable
        if not flag:
            self.grad = None


class Module:
    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix=""):
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            arr = np.asarray(arr)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def freeze(self):
        for p in self.parameters():
            p.set_trainable(False)
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.set_trainable(True)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, rng=None, gain=2.0, zero=False, pad_mode="zeros"):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k * k
        bound = np.sqrt(3.0 * gain / fan_in)
        w = np.zeros((cout, cin, k, k)) if zero else rng.uniform(-bound, bound, size=(cout, cin, k, k))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.pad_mode = pad_mode

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, pad_mode=self.pad_mode)


class ConvGRU(Module):
    def __init__(self, hidden_dim, input_dim, k=3, rng=None, pad_mode="zeros"):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = hidden_dim + input_dim
        self.convz = Conv2d(c, hidden_dim, k, rng=rng, gain=1.0)
        self.convr = Conv2d(c, hidden_dim, k, rng=rng, gain=1.0)
        self.convq = Conv2d(c, hidden_dim, k, rng=rng, gain=1.0)
        self.pad_mode = pad_mode

    def params(self):
        return {
            "wz": self.convz.weight, "bz": self.convz.bias,
            "wr": self.convr.weight, "br": self.convr.bias,
            "wq": self.convq.weight, "bq": self.convq.bias,
        }

    def __call__(self, h, x):
        return gru_cell(h, x, self.params(), pad_mode=self.pad_mode)

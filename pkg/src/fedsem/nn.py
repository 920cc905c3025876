"""Neural network building blocks over the autodiff engine.

Modules register parameters and buffers through attribute assignment, so
``state_dict`` ordering is the (deterministic) attribute insertion
order.  Parameters are trainable tensors; buffers are plain float64
arrays carried alongside them (running statistics), saved and averaged
but never differentiated.
"""

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """Trainable tensor; requires_grad is always on."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class with recursive parameter/buffer/submodule registry."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        array = np.asarray(array, dtype=np.float64)
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    # -- traversal ------------------------------------------------------------

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            # read through the attribute: registered buffers may be replaced
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # -- state ----------------------------------------------------------------

    def state_dict(self):
        """Flat name -> float64 array map covering parameters and buffers."""
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, b in self.named_buffers():
            state["buffer." + name] = np.asarray(b, dtype=np.float64).copy()
        return state

    def load_state_dict(self, state):
        expected = set()
        for name, p in self.named_parameters():
            expected.add(name)
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state dict")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{value.shape} vs {p.data.shape}")
            p.data = value.copy()
        for name, _ in self.named_buffers():
            key = "buffer." + name
            expected.add(key)
            if key not in state:
                raise KeyError(f"missing buffer {name!r} in state dict")
            self._set_buffer(name, np.asarray(state[key], dtype=np.float64))
        extra = set(state) - expected
        if extra:
            raise KeyError(f"unexpected entries in state dict: {sorted(extra)}")

    def _set_buffer(self, dotted, value):
        module = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            module = module._modules[part]
        leaf = parts[-1]
        current = module._buffers[leaf]
        if value.shape != current.shape:
            raise ValueError(f"shape mismatch for buffer {dotted!r}: "
                             f"{value.shape} vs {current.shape}")
        module._buffers[leaf] = value.copy()
        object.__setattr__(module, leaf, module._buffers[leaf])

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Sequence of submodules registered under their index."""

    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# -- layers -------------------------------------------------------------------

def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(_uniform(rng, (d_in, d_out), bound))
        self.bias = Parameter(_uniform(rng, (d_out,), bound)) if bias else None

    def forward(self, x):
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        bound = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel, kernel), bound))
        self.bias = Parameter(_uniform(rng, (c_out,), bound)) if bias else None

    def forward(self, x):
        out = ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + ad.reshape(self.bias, (1, -1, 1, 1))
        return out


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        bound = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.weight = Parameter(_uniform(rng, (c_in, c_out, kernel, kernel), bound))
        self.bias = Parameter(_uniform(rng, (c_out,), bound)) if bias else None

    def forward(self, x):
        out = ad.conv_transpose2d(x, self.weight, stride=self.stride,
                                  padding=self.padding)
        if self.bias is not None:
            out = out + ad.reshape(self.bias, (1, -1, 1, 1))
        return out


class LayerNorm(Module):
    """Normalization over the trailing feature axis."""

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x):
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - ad.broadcast_to(mean, x.shape)
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = ad.power(var + self.eps, -0.5)
        xhat = centered * ad.broadcast_to(inv, x.shape)
        return xhat * self.gamma + self.beta


class BatchNorm2d(Module):
    """Per-channel normalization over (N, H, W) with running statistics.

    Training mode normalizes with biased batch moments and folds the
    unbiased variance into the running estimates; eval mode normalizes
    with the running estimates as constants.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        n, c, h, w = x.shape
        if self.training:
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - ad.broadcast_to(mean, x.shape)
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            count = n * h * w
            unbiased = var.data.reshape(c) * count / max(count - 1, 1)
            new_mean = ((1.0 - self.momentum) * self.running_mean
                        + self.momentum * mean.data.reshape(c))
            new_var = ((1.0 - self.momentum) * self.running_var
                       + self.momentum * unbiased)
            self._set_buffer("running_mean", new_mean)
            self._set_buffer("running_var", new_var)
            inv = ad.power(var + self.eps, -0.5)
            xhat = centered * ad.broadcast_to(inv, x.shape)
        else:
            mean = self.running_mean.reshape(1, c, 1, 1)
            inv = 1.0 / np.sqrt(self.running_var.reshape(1, c, 1, 1) + self.eps)
            xhat = (x - Tensor(mean)) * Tensor(inv)
        return xhat * ad.reshape(self.gamma, (1, c, 1, 1)) \
            + ad.reshape(self.beta, (1, c, 1, 1))


# -- optimization -------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay applied before the moment update."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.05):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise RuntimeError("parameter has no gradient; run backward "
                                   "before step")
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def linear_lr(step, total_steps, lr_start, lr_end):
    """Linearly interpolated rate; step 0 gives lr_start, the last step lr_end."""
    if total_steps <= 1:
        return lr_start
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_start + (lr_end - lr_start) * frac

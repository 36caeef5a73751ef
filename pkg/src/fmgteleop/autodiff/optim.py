from collections import OrderedDict

import numpy as np

from .tensor import Tensor


class ParameterStore:
    """Named trainable tensors plus non-trainable buffers (batch-norm statistics).

    Iteration order is insertion order; names are unique across both maps.
    """

    def __init__(self):
        self.params = OrderedDict()
        self.buffers = OrderedDict()
        self.adam = {}

    def add_param(self, name, data):
        self._check_new(name)
        t = Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name, data):
        self._check_new(name)
        arr = np.ascontiguousarray(data)
        self.buffers[name] = arr
        return arr

    def _check_new(self, name):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")

    def __getitem__(self, name):
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def __contains__(self, name):
        return name in self.params or name in self.buffers

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        """All tensors (params then buffers) as arrays, in a fixed order."""
        out = OrderedDict((k, p.data) for k, p in self.params.items())
        out.update(self.buffers)
        return out

    def load_state_dict(self, tensors):
        missing = set(self.params) | set(self.buffers)
        for name, arr in tensors.items():
            if name in self.params:
                target = self.params[name].data
            elif name in self.buffers:
                target = self.buffers[name]
            else:
                raise KeyError(f"unexpected tensor {name!r}")
            if target.shape != arr.shape:
                raise ValueError(f"tensor {name!r}: shape {arr.shape} != expected {target.shape}")
            target[...] = arr
            missing.discard(name)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")

    def copy(self):
        new = ParameterStore()
        for k, p in self.params.items():
            new.add_param(k, p.data.copy())
        for k, b in self.buffers.items():
            new.add_buffer(k, b.copy())
        new.adam = {k: (m.copy(), v.copy(), t) for k, (m, v, t) in self.adam.items()}
        return new

    def n_params(self):
        return int(sum(p.data.size for p in self.params.values()))


def adam_step(store, grads=None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update applied in place.

    ``grads`` maps names to arrays; when omitted the ``.grad`` of each
    parameter is used. Parameters without a gradient are left untouched and
    their step count does not advance.
    """
    for name, p in store.params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        dt = p.data.dtype.type
        m, v, t = store.adam.get(name, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
        t += 1
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        mhat = m / dt(1 - beta1 ** t)
        vhat = v / dt(1 - beta2 ** t)
        p.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
        store.adam[name] = (m, v, t)
    return store

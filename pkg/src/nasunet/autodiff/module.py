"""Parameter containers with stable dotted names."""
import numpy as np

from .tensor import Parameter, get_default_dtype


class Module:
    """Base class; parameters and submodules are discovered from attributes.

    Lists/tuples of modules are traversed with their index as the name
    component, giving paths like ``down_cells.0.edges.3.ops.2.conv.weight``.
    """

    def named_parameters(self, prefix=""):
        seen = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix):
        for key, val in vars(self).items():
            if not key.startswith("_"):
                yield from _walk_value(val, f"{prefix}{key}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = own.keys() - state.keys()
            extra = state.keys() - own.keys()
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, arr in state.items():
            if name in own:
                p = own[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
                p.data = np.array(arr, dtype=p.data.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk_value(val, path):
    if isinstance(val, Parameter):
        yield path, val
    elif isinstance(val, Module):
        yield from val._walk(path + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk_value(item, f"{path}.{i}")


def kaiming_normal(rng, shape, fan_in):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(get_default_dtype())

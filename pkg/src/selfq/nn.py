"""Small module tree and the layers both towers are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02


class Module:
    """Attribute-walking parameter container.

    Parameters are :class:`Tensor` attributes, children are :class:`Module`
    attributes or lists of modules.  Names are dotted paths in definition order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{key}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored as [d_out, d_in].

    An attached low-rank adapter (see :mod:`selfq.lora`) adds
    ``scale * (x A^T) B^T`` on top of the host transform.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float = INIT_STD):
        self.weight = Tensor(rng.normal(0.0, std, (d_out, d_in)))
        self.bias = Tensor(np.zeros(d_out)) if bias else None
        self._adapter = None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self, prefix: str = ""):
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias
        if self._adapter is not None:
            yield prefix + "lora_A", self._adapter.A
            yield prefix + "lora_B", self._adapter.B

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, ad.transpose(self.weight))
        if self.bias is not None:
            y = ad.add(y, self.bias)
        a = self._adapter
        if a is not None:
            low = ad.matmul(ad.matmul(x, ad.transpose(a.A)), ad.transpose(a.B))
            y = ad.add(y, ad.scale(low, a.scale))
        return y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d))
        self.beta = Tensor(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


def causal_mask(n: int) -> Tensor:
    return Tensor(np.where(np.tri(n, dtype=bool), 0.0, -np.inf))


class SelfAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self._n_heads = n_heads

    def __call__(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        d = x.shape[1]
        dh = d // self._n_heads
        q, k, v = self.q(x), self.k(x), self.v(x)
        heads = []
        for h in range(self._n_heads):
            lo, hi = h * dh, (h + 1) * dh
            s = ad.scale(ad.matmul(ad.slice_cols(q, lo, hi), ad.transpose(ad.slice_cols(k, lo, hi))),
                         dh ** -0.5)
            if mask is not None:
                s = ad.add(s, mask)
            heads.append(ad.matmul(ad.softmax(s, axis=1), ad.slice_cols(v, lo, hi)))
        return self.o(ad.concat_cols(heads) if len(heads) > 1 else heads[0])


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, rng)

    def __call__(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x), mask))
        return ad.add(x, self.mlp(self.ln2(x)))

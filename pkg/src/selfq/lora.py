"""Low-rank adapters on named linear transforms.

Adapter parameters show up in ``named_parameters`` as ``<target>.lora_A`` and
``<target>.lora_B`` so they can be saved and shipped apart from the base weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import Tensor
from .nn import Linear, Module

LLM_RANK, LLM_ALPHA = 128, 256.0
VIT_RANK, VIT_ALPHA = 32, 64.0
A_INIT_STD = 0.02

BLOCK_LINEARS = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2")


class AdapterConfigError(ValueError):
    pass


class AdapterStateError(RuntimeError):
    pass


@dataclass
class Adapter:
    A: Tensor
    B: Tensor
    r: int
    alpha: float
    target: str

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def delta(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data)


@dataclass
class AdapterSet:
    model: Module
    adapters: dict[str, Adapter] = field(default_factory=dict)
    merged: bool = False
    _saved: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def names(self) -> list[str]:
        return [n for t in self.adapters for n in (f"{t}.lora_A", f"{t}.lora_B")]

    def n_params(self) -> int:
        return sum(a.A.data.size + a.B.data.size for a in self.adapters.values())


def linear_targets(model: Module) -> dict[str, Linear]:
    return {name: m for name, m in model.named_modules() if isinstance(m, Linear)}


def block_targets(prefix: str, n_layers: int, suffixes: Iterable[str] = BLOCK_LINEARS) -> list[str]:
    return [f"{prefix}.blocks.{i}.{s}" for i in range(n_layers) for s in suffixes]


def attach(model: Module, targets: Iterable[str], r: int, alpha: float,
           rng: np.random.Generator) -> AdapterSet:
    """Give each named linear a fresh adapter: A ~ N(0, 0.02), B = 0."""
    available = linear_targets(model)
    targets = list(targets)
    unknown = [t for t in targets if t not in available]
    if unknown:
        raise AdapterConfigError(f"no linear transform named {unknown[0]!r}")
    if r < 1:
        raise AdapterConfigError(f"adapter rank must be positive, got {r}")
    out = AdapterSet(model)
    for t in targets:
        lin = available[t]
        if lin._adapter is not None:
            raise AdapterConfigError(f"{t!r} already carries an adapter")
        a = Adapter(Tensor(rng.normal(0.0, A_INIT_STD, (r, lin.d_in))),
                    Tensor(np.zeros((lin.d_out, r))), r, float(alpha), t)
        lin._adapter = a
        out.adapters[t] = a
    return out


def merge(aset: AdapterSet) -> Module:
    """Fold every adapter into its host: W <- W + (alpha/r) B A, then detach."""
    if aset.merged:
        raise AdapterStateError("adapter set is already merged")
    hosts = linear_targets(aset.model)
    for t, a in aset.adapters.items():
        lin = hosts[t]
        aset._saved[t] = lin.weight.data.copy()
        lin.weight.data = lin.weight.data + a.delta()
        lin._adapter = None
    aset.merged = True
    return aset.model


def unmerge(aset: AdapterSet) -> Module:
    """Restore the exact pre-merge host weights and re-attach the adapters."""
    if not aset.merged:
        raise AdapterStateError("adapter set is not merged")
    hosts = linear_targets(aset.model)
    for t, a in aset.adapters.items():
        lin = hosts[t]
        lin.weight.data = aset._saved.pop(t)
        lin._adapter = a
    aset.merged = False
    return aset.model

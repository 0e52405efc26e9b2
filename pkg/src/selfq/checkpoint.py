"""Single-file checkpoints: model weights, adapters, optimizer and data-order state.

Layout (all integers little-endian)::

    b"SELFQCKP"  u32 version  u64 header_len  header (UTF-8 JSON, sorted keys)
    float64 payloads, back to back, in header["tensors"] order

Each tensor entry is ``[name, shape, offset]`` with offset in bytes from the
start of the payload area.  Parameters are stored as ``param.<name>``, Adam
moments as ``optim.m.<name>`` / ``optim.v.<name>``.  Saving is deterministic,
so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .language import Vocab
from .lora import AdapterStateError
from .model import ModelConfig, VisionLanguageModel
from .trainer import AdamWState, TrainPlan, Trainer

MAGIC = b"SELFQCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: VisionLanguageModel
    stage: str | None = None
    step: int = 0
    plan: TrainPlan | None = None
    opt: AdamWState = field(default_factory=AdamWState)
    rng_state: dict = field(default_factory=dict)

    def trainer(self, plan: TrainPlan | None = None) -> Trainer:
        """A trainer that continues exactly where the saved one stopped."""
        plan = plan or self.plan
        if plan is None:
            raise CheckpointError("checkpoint carries no training plan")
        tr = Trainer(self.model, plan)
        if plan.stage == self.stage:
            tr.opt = self.opt
            tr.step_count = self.step
            tr.rng_state = self.rng_state
        return tr


def _header(model: VisionLanguageModel, trainer: Trainer | None) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    for aset in model.adapter_sets:
        if aset.merged:
            raise AdapterStateError("unmerge adapters before saving; merged weights are not a training state")
    tensors = [(f"param.{n}", p.data) for n, p in model.named_parameters()]
    hdr = {
        "config": model.config.to_json(),
        "vocab": model.vocab.to_json(),
        "adapters": [{"targets": list(a.adapters), "r": next(iter(a.adapters.values())).r if a.adapters else 0,
                      "alpha": next(iter(a.adapters.values())).alpha if a.adapters else 0.0}
                     for a in model.adapter_sets],
        "stage": None, "step": 0, "plan": None, "rng_state": {}, "optim_t": {},
    }
    if trainer is not None:
        hdr.update(stage=trainer.plan.stage, step=trainer.step_count, plan=trainer.plan.to_json(),
                   rng_state=trainer.rng_state, optim_t=dict(sorted(trainer.opt.t.items())))
        for name in sorted(trainer.opt.m):
            tensors.append((f"optim.m.{name}", trainer.opt.m[name]))
            tensors.append((f"optim.v.{name}", trainer.opt.v[name]))
    return hdr, tensors


def save_checkpoint(path: str | Path, model: VisionLanguageModel, trainer: Trainer | None = None) -> None:
    hdr, tensors = _header(model, trainer)
    table, off = [], 0
    for name, arr in tensors:
        table.append([name, list(arr.shape), off])
        off += arr.size * 8
    hdr["tensors"] = table
    blob = json.dumps(hdr, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", VERSION, len(blob)) + blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)


def read_raw(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Header dict and every stored tensor, without building a model."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 12
    try:
        hdr = json.loads(data[start:start + n].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    base = start + n
    arrays = {}
    for name, shape, off in hdr["tensors"]:
        count = int(np.prod(shape, dtype=np.int64))
        if base + off + count * 8 > len(data):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(data, "<f8", count, base + off).reshape(shape).astype(np.float64)
    return hdr, arrays


def load_checkpoint(path: str | Path) -> Checkpoint:
    hdr, arrays = read_raw(path)
    Vocab.from_json(hdr["vocab"])
    model = VisionLanguageModel(ModelConfig.from_json(hdr["config"]))
    if hdr["adapters"]:
        model.attach_adapters()
        got = [list(a.adapters) for a in model.adapter_sets]
        if got != [a["targets"] for a in hdr["adapters"]]:
            raise CheckpointError(f"{path}: adapter targets disagree with the stored config")
    params = model.parameters()
    stored = {k[len("param."):] for k in arrays if k.startswith("param.")}
    if stored != set(params):
        missing = sorted(set(params) ^ stored)
        raise CheckpointError(f"{path}: parameter set mismatch, e.g. {missing[0]!r}")
    for name, p in params.items():
        a = arrays[f"param.{name}"]
        if a.shape != p.data.shape:
            raise CheckpointError(f"{path}: {name} has shape {a.shape}, model expects {p.data.shape}")
        p.data = a
    opt = AdamWState()
    for name, t in hdr["optim_t"].items():
        opt.m[name] = arrays[f"optim.m.{name}"]
        opt.v[name] = arrays[f"optim.v.{name}"]
        opt.t[name] = int(t)
    plan = TrainPlan(**hdr["plan"]) if hdr["plan"] else None
    return Checkpoint(model, hdr["stage"], int(hdr["step"]), plan, opt, hdr["rng_state"])

"""The full two-tower model: vision encoder, prototype extractor, projector, decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .data import TurnSequence
from .language import LanguageModel, LMConfig, Vocab
from .lora import BLOCK_LINEARS, LLM_ALPHA, LLM_RANK, VIT_ALPHA, VIT_RANK, AdapterSet, attach, block_targets
from .nn import Module
from .vision import (ImageTokens, PrototypeBank, Projector, VisionConfig, VisionEncoder, em_cluster,
                     encode_image, enhance_tokens, project)

GROUPS = ("vision", "proto", "projector", "lm", "adapters")


@dataclass
class AdapterSettings:
    llm_rank: int = LLM_RANK
    llm_alpha: float = LLM_ALPHA
    vit_rank: int = VIT_RANK
    vit_alpha: float = VIT_ALPHA
    # suffixes inside every transformer block, plus extra top-level LM linears
    block_targets: list[str] = field(default_factory=lambda: list(BLOCK_LINEARS))
    llm_extra_targets: list[str] = field(default_factory=lambda: ["head"])


@dataclass
class ModelConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    adapters: AdapterSettings = field(default_factory=AdapterSettings)
    init_seed: int = 0

    def __post_init__(self):
        if self.vision.d_model != self.lm.d_model:
            raise ValueError(f"projector width {self.vision.d_model} != LM width {self.lm.d_model}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(VisionConfig(**obj["vision"]), LMConfig(**obj["lm"]),
                   AdapterSettings(**obj["adapters"]), obj["init_seed"])


def param_group(name: str) -> str:
    if name.endswith((".lora_A", ".lora_B")):
        return "adapters"
    return name.split(".", 1)[0]


@dataclass
class ExampleTargets:
    targets: np.ndarray
    mask: np.ndarray
    question_mask: np.ndarray
    answer_mask: np.ndarray


class VisionLanguageModel(Module):
    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.init_seed)
        self.vision = VisionEncoder(cfg.vision, rng)
        self.proto = PrototypeBank(cfg.vision, rng)
        self.projector = Projector(cfg.vision, rng)
        self.lm = LanguageModel(cfg.lm, rng)
        self._cfg = cfg
        self._vocab = Vocab()
        self._adapter_sets: list[AdapterSet] = []
        if cfg.lm.vocab_size != len(self._vocab):
            raise ValueError(f"vocab_size {cfg.lm.vocab_size} != tokenizer size {len(self._vocab)}")

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def vocab(self) -> Vocab:
        return self._vocab

    @property
    def adapter_sets(self) -> list[AdapterSet]:
        return self._adapter_sets

    @property
    def n_image_tokens(self) -> int:
        return self._cfg.vision.n_tokens

    def adapter_targets(self) -> tuple[list[str], list[str]]:
        a = self._cfg.adapters
        vit = block_targets("vision", self._cfg.vision.n_layers, a.block_targets)
        llm = block_targets("lm", self._cfg.lm.n_layers, a.block_targets)
        llm += [f"lm.{t}" for t in a.llm_extra_targets]
        return vit, llm

    def attach_adapters(self, seed: int = 0) -> list[AdapterSet]:
        """LoRA in both towers with their own rank and scale."""
        if self._adapter_sets:
            raise RuntimeError("adapters already attached")
        rng = np.random.default_rng(seed)
        a = self._cfg.adapters
        vit, llm = self.adapter_targets()
        self._adapter_sets = [attach(self, vit, a.vit_rank, a.vit_alpha, rng),
                              attach(self, llm, a.llm_rank, a.llm_alpha, rng)]
        return self._adapter_sets

    # -- forward --------------------------------------------------------------

    def image_tokens(self, pixels: np.ndarray) -> ImageTokens:
        tokens = encode_image(self.vision, pixels)
        _, centers = em_cluster(self.proto, tokens)
        return enhance_tokens(self.proto, tokens, centers)

    def image_features(self, pixels: np.ndarray) -> Tensor:
        """H_v: [L_v, d_model] rows that replace the image placeholder."""
        return project(self.projector, self.image_tokens(pixels))

    def logits(self, text_ids, H_v: Tensor | None, rows=None) -> Tensor:
        return self.lm.forward(self.lm.splice(text_ids, H_v, self._vocab.image), rows)

    def targets(self, seq: TurnSequence) -> ExampleTargets:
        """Next-token targets in spliced coordinates: row ``pos`` predicts ``pos + 1``."""
        ids = seq.token_ids
        L_v = self.n_image_tokens
        p = ids.index(self._vocab.image)
        n_full = len(ids) - 1 + L_v
        tgt = np.zeros(n_full, dtype=np.int64)
        mask = np.zeros(n_full, dtype=bool)
        qm = np.zeros(n_full, dtype=bool)
        am = np.zeros(n_full, dtype=bool)
        q_sel, a_sel = seq.question_mask(), seq.answer_mask()
        for i in range(1, len(ids)):
            if i == p:
                continue
            row = (i if i < p else i - 1 + L_v) - 1
            tgt[row] = ids[i]
            mask[row] = seq.loss_mask[i]
            qm[row] = q_sel[i]
            am[row] = a_sel[i]
        return ExampleTargets(tgt, mask, qm, am)

    def forward_example(self, seq: TurnSequence, pixels: np.ndarray, rows=None) -> Tensor:
        return self.logits(seq.token_ids, self.image_features(pixels), rows)

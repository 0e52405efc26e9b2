"""Greedy decoding for answering (``[usr]`` prompt) and self-questioning (``[vusr]``)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import generation_prefix
from .model import VisionLanguageModel

ANSWER, SELFQ = "answer", "selfq"
CAPTION_PROMPT = "Provide a brief description of the given image, your answer should be in one sentence."


class RequestError(ValueError):
    pass


@dataclass
class GenRequest:
    image: np.ndarray | None
    mode: str = ANSWER
    prompt_text: str | None = None
    max_new_tokens: int = 64
    # earlier (kind, question, answer) turns of the same conversation
    history: Sequence[tuple[str, str, str]] = ()

    def validate(self) -> None:
        if self.image is None:
            raise RequestError("generation needs an image")
        if self.mode == ANSWER and self.prompt_text is None:
            raise RequestError("answer mode needs a question")
        if self.mode == SELFQ and self.prompt_text is not None:
            raise RequestError("self-questioning takes no prompt text; its only instruction is [vusr]")
        if self.mode not in (ANSWER, SELFQ):
            raise RequestError(f"unknown mode {self.mode!r}")
        if self.max_new_tokens < 0:
            raise RequestError("max_new_tokens must be non-negative")


@dataclass
class Generation:
    text: str
    token_ids: list[int]
    prefix_ids: list[int]
    stopped: bool  # True when the delimiter ended generation


def generate(model: VisionLanguageModel, req: GenRequest) -> Generation:
    """Argmax decoding until the delimiter or ``max_new_tokens``; the delimiter is stripped."""
    req.validate()
    vocab = model.vocab
    prefix = generation_prefix(req.mode, vocab, req.prompt_text, req.history)
    H_v = model.image_features(req.image)
    limit = model.lm.config.max_seq_len - (len(prefix) - 1 + H_v.shape[0])
    out: list[int] = []
    stopped = False
    while len(out) < min(req.max_new_tokens, max(limit, 0)):
        logits = model.logits(prefix + out, H_v).data
        nxt = int(np.argmax(logits[-1]))
        if nxt == vocab.delim:
            stopped = True
            break
        out.append(nxt)
    return Generation(vocab.detokenize(out), out, prefix, stopped)


def answer(model: VisionLanguageModel, image: np.ndarray, question: str, max_new_tokens: int = 64,
           history: Sequence[tuple[str, str, str]] = ()) -> str:
    return generate(model, GenRequest(image, ANSWER, question, max_new_tokens, history)).text


def self_question(model: VisionLanguageModel, image: np.ndarray, max_new_tokens: int = 64,
                  history: Sequence[tuple[str, str, str]] = ()) -> str:
    return generate(model, GenRequest(image, SELFQ, None, max_new_tokens, history)).text


def caption(model: VisionLanguageModel, image: np.ndarray, instruction: str = CAPTION_PROMPT,
            max_new_tokens: int = 64) -> str:
    return answer(model, image, instruction, max_new_tokens)

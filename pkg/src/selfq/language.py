"""Byte-level vocabulary and a small causal decoder over spliced image+text input."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import INIT_STD, Block, LayerNorm, Linear, Module, causal_mask


class SequenceLengthError(ValueError):
    pass


class Vocab:
    """256 byte ids followed by reserved ids.

    Text is always tokenized to raw UTF-8 bytes, so a literal ``"[vusr]"`` typed
    by a user becomes six byte ids and can never collide with the reserved
    token.  Undecodable bytes round-trip through ``surrogateescape``.
    """

    SPECIALS = ("<pad>", "<bos>", "[usr]", "[vusr]", "[aswr]", "<o_d>", "<image>")
    N_BYTES = 256

    def __init__(self):
        self.special_ids = {tok: self.N_BYTES + i for i, tok in enumerate(self.SPECIALS)}
        self._names = {i: tok for tok, i in self.special_ids.items()}

    def __len__(self) -> int:
        return self.N_BYTES + len(self.SPECIALS)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and other.to_json() == self.to_json()

    pad = property(lambda self: self.special_ids["<pad>"])
    bos = property(lambda self: self.special_ids["<bos>"])
    usr = property(lambda self: self.special_ids["[usr]"])
    vusr = property(lambda self: self.special_ids["[vusr]"])
    aswr = property(lambda self: self.special_ids["[aswr]"])
    delim = property(lambda self: self.special_ids["<o_d>"])
    image = property(lambda self: self.special_ids["<image>"])

    def is_special(self, i: int) -> bool:
        return i >= self.N_BYTES

    def tokenize(self, text: str) -> list[int]:
        return list(text.encode("utf-8", "surrogateescape"))

    def detokenize(self, ids: Sequence[int]) -> str:
        out, buf = [], bytearray()
        for i in ids:
            if i < self.N_BYTES:
                buf.append(i)
                continue
            out.append(buf.decode("utf-8", "surrogateescape"))
            buf = bytearray()
            out.append(self._names[i])
        out.append(buf.decode("utf-8", "surrogateescape"))
        return "".join(out)

    def to_json(self) -> dict:
        return {"kind": "byte", "n_bytes": self.N_BYTES, "specials": list(self.SPECIALS)}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        v = cls()
        if obj != v.to_json():
            raise ValueError(f"unsupported vocabulary table: {obj}")
        return v


@dataclass
class LMConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 263
    max_seq_len: int = 512

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


@dataclass
class MixedSequence:
    """Embedded input with image rows spliced in at the placeholder."""

    H: Tensor
    text_ids: list[int]
    image_span: tuple[int, int]

    def __len__(self) -> int:
        return self.H.shape[0]


class LanguageModel(Module):
    def __init__(self, cfg: LMConfig, rng: np.random.Generator):
        self.tok_embed = Tensor(rng.normal(0.0, INIT_STD, (cfg.vocab_size, cfg.d_model)))
        self.pos_embed = Tensor(rng.normal(0.0, INIT_STD, (cfg.max_seq_len, cfg.d_model)))
        self.blocks = [Block(cfg.d_model, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, cfg.vocab_size, rng, bias=False)
        self._cfg = cfg

    @property
    def config(self) -> LMConfig:
        return self._cfg

    def splice(self, text_ids: Sequence[int], H_v: Tensor | None, image_id: int) -> MixedSequence:
        """Embed ``text_ids`` and replace the single ``image_id`` entry with ``H_v`` rows.

        Without a placeholder the sequence is pure text and ``H_v`` must be None.
        Positions are sequential over the spliced result.
        """
        ids = list(text_ids)
        where = [i for i, t in enumerate(ids) if t == image_id]
        if not where:
            if H_v is not None:
                raise ValueError("image rows given but the text has no image placeholder")
            pieces, span = [ad.embedding_lookup(self.tok_embed, ids)], (len(ids), 0)
        else:
            if len(where) > 1:
                raise ValueError("more than one image placeholder in sequence")
            p = where[0]
            n_img = 0 if H_v is None else H_v.shape[0]
            pieces = [ad.embedding_lookup(self.tok_embed, ids[:p])]
            if n_img:
                pieces.append(H_v)
            pieces.append(ad.embedding_lookup(self.tok_embed, ids[p + 1:]))
            span = (p, n_img)
        pieces = [t for t in pieces if t.shape[0]]
        if not pieces:
            raise ValueError("cannot embed an empty sequence")
        H = ad.concat_rows(pieces) if len(pieces) > 1 else pieces[0]
        L = H.shape[0]
        if L > self._cfg.max_seq_len:
            raise SequenceLengthError(f"sequence of {L} positions exceeds max_seq_len {self._cfg.max_seq_len}")
        H = ad.add(H, ad.embedding_lookup(self.pos_embed, range(L)))
        return MixedSequence(H, ids, span)

    def forward(self, seq: MixedSequence, rows: Sequence[int] | None = None) -> Tensor:
        """Logits [L, vocab]; row i depends only on positions <= i.

        ``rows`` restricts the output head to those positions (training only
        needs the loss-target rows).
        """
        L = len(seq)
        if L > self._cfg.max_seq_len:
            raise SequenceLengthError(f"sequence of {L} positions exceeds max_seq_len {self._cfg.max_seq_len}")
        mask = causal_mask(L)
        x = seq.H
        for blk in self.blocks:
            x = blk(x, mask)
        if rows is not None:
            x = ad.embedding_lookup(x, rows)
        return self.head(self.ln_f(x))

    __call__ = forward

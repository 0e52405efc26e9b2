"""Conversation ingestion, self-questioning turn assignment and template rendering.

Rendered layout (text-id space, the image is one placeholder id)::

    [bos] system [image] ( prefix question <o_d> [aswr] answer <o_d> ) x P

``prefix`` is ``[usr]`` or ``[vusr]``.  Loss targets are every answer with its
delimiter, plus question and delimiter in ``[vusr]`` turns only.  Caption
records for pre-training render as ``[bos] [image] caption <o_d>``.
"""

from __future__ import annotations

import hashlib
import json
import statistics
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .language import Vocab

SYSTEM_MESSAGE = (
    "The assistant gives helpful, detailed, and polite answers to the user's questions. "
    "Also, the assistant is a curious virtual user can ask complex questions that are "
    "relevant to the content in the image."
)
IMAGE_MARKER = "<image>"

USR, VUSR = "usr", "vusr"

RECORD_MAGIC = b"SELFQREC"
RECORD_VERSION = 1

QUESTION_KINDS = ("question", "q_delim")
ANSWER_KINDS = ("answer", "a_delim")


class DataError(ValueError):
    pass


class FormatError(DataError):
    pass


class TruncationError(DataError):
    pass


@dataclass
class Conversation:
    id: str
    image: object  # path string or nested list of pixels
    turns: list[tuple[str, str]]

    @property
    def P(self) -> int:
        return len(self.turns)


@dataclass
class SqPolicy:
    delta: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass(frozen=True)
class Span:
    kind: str
    start: int
    end: int
    turn: int = -1

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class TurnSequence:
    conv_id: str
    token_ids: list[int]
    loss_mask: list[bool]
    turn_kinds: list[str]
    spans: list[Span] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)

    def roles(self) -> list[str]:
        out = [""] * len(self.token_ids)
        for s in self.spans:
            out[s.start:s.end] = [s.kind] * len(s)
        return out

    def part_mask(self, kinds: Sequence[str]) -> np.ndarray:
        sel = np.zeros(len(self.token_ids), dtype=bool)
        for s in self.spans:
            if s.kind in kinds:
                sel[s.start:s.end] = True
        return sel & np.asarray(self.loss_mask, dtype=bool)

    def question_mask(self) -> np.ndarray:
        return self.part_mask(QUESTION_KINDS)

    def answer_mask(self) -> np.ndarray:
        return self.part_mask(ANSWER_KINDS)


# ---------------------------------------------------------------------------
# conversation JSON


def parse_conversation(obj: dict) -> Conversation:
    for key in ("id", "image", "conversations"):
        if key not in obj:
            raise FormatError(f"conversation record missing {key!r}")
    cid = str(obj["id"])
    msgs = obj["conversations"]
    if not msgs or len(msgs) % 2:
        raise FormatError(f"{cid}: need alternating human/gpt messages, got {len(msgs)}")
    turns = []
    for j in range(0, len(msgs), 2):
        h, g = msgs[j], msgs[j + 1]
        if h.get("from") != "human" or g.get("from") != "gpt":
            raise FormatError(f"{cid}: turn {j // 2 + 1} does not alternate human -> gpt")
        q, a = str(h["value"]), str(g["value"])
        if j == 0:
            if q.count(IMAGE_MARKER) != 1:
                raise FormatError(f"{cid}: first human turn must contain exactly one {IMAGE_MARKER}")
            q = q.replace(IMAGE_MARKER, "", 1).strip("\n")
        elif IMAGE_MARKER in q or IMAGE_MARKER in a:
            raise FormatError(f"{cid}: image placeholder outside the first human turn")
        turns.append((q, a))
    return Conversation(cid, obj["image"], turns)


def load_conversations(path: str | Path) -> list[Conversation]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read conversations from {path}: {e}") from e
    if not isinstance(raw, list):
        raise FormatError(f"{path}: expected a JSON list of conversations")
    return [parse_conversation(o) for o in raw]


def conversation_to_json(conv: Conversation) -> dict:
    msgs = []
    for j, (q, a) in enumerate(conv.turns):
        msgs.append({"from": "human", "value": f"{IMAGE_MARKER}\n{q}" if j == 0 else q})
        msgs.append({"from": "gpt", "value": a})
    return {"id": conv.id, "image": conv.image, "conversations": msgs}


# ---------------------------------------------------------------------------
# turn kinds


def turn_draw(seed: int, conv_id: str, j: int) -> float:
    """Counter-based uniform draw in [0, 1) keyed by (seed, conversation, turn).

    Independent of dataset order, so shuffling cannot change turn kinds.
    """
    key = struct.pack("<QQ", seed & 0xFFFFFFFFFFFFFFFF, j) + conv_id.encode("utf-8")
    h = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(h, "little") / 2.0 ** 64


def assign_turn_kinds(conv: Conversation, policy: SqPolicy) -> list[str]:
    if conv.P < 1:
        raise FormatError(f"{conv.id}: conversation has no turns")
    kinds = [USR]
    for j in range(2, conv.P + 1):
        r = turn_draw(policy.rng_seed, conv.id, j)
        kinds.append(VUSR if r > policy.delta else USR)
    return kinds


# ---------------------------------------------------------------------------
# rendering


class _Builder:
    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        self.ids: list[int] = []
        self.mask: list[bool] = []
        self.spans: list[Span] = []

    def add(self, kind: str, ids: Sequence[int], learn: bool = False, turn: int = -1) -> None:
        start = len(self.ids)
        self.ids.extend(ids)
        self.mask.extend([learn] * len(ids))
        self.spans.append(Span(kind, start, len(self.ids), turn))

    def header(self, system: bool = True) -> None:
        self.add("bos", [self.vocab.bos])
        if system:
            self.add("system", self.vocab.tokenize(SYSTEM_MESSAGE))
        self.add("image", [self.vocab.image])

    def turn_opening(self, question: str, kind: str, turn: int) -> None:
        v = self.vocab
        vq = kind == VUSR
        self.add("prefix", [v.vusr if vq else v.usr], False, turn)
        self.add("question", v.tokenize(question), vq, turn)
        self.add("q_delim", [v.delim], vq, turn)
        self.add("aswr", [v.aswr], False, turn)

    def answer(self, text: str, turn: int) -> None:
        self.add("answer", self.vocab.tokenize(text), True, turn)
        self.add("a_delim", [self.vocab.delim], True, turn)


def _check_length(conv_id: str, n_text: int, max_len: int | None, image_len: int) -> None:
    if max_len is None:
        return
    total = n_text - 1 + image_len
    if total > max_len:
        raise TruncationError(f"{conv_id}: {total} positions exceed the limit of {max_len}; refusing to truncate")


def render(conv: Conversation, kinds: Sequence[str], vocab: Vocab, max_len: int | None = None,
           image_len: int = 1) -> TurnSequence:
    """Render a fine-tuning conversation; ``max_len`` counts spliced positions."""
    if len(kinds) != conv.P:
        raise FormatError(f"{conv.id}: {len(kinds)} turn kinds for {conv.P} turns")
    if kinds and kinds[0] != USR:
        raise FormatError(f"{conv.id}: the first turn cannot be a self-questioning turn")
    b = _Builder(vocab)
    b.header()
    for j, ((q, a), k) in enumerate(zip(conv.turns, kinds), start=1):
        if k not in (USR, VUSR):
            raise FormatError(f"{conv.id}: unknown turn kind {k!r}")
        b.turn_opening(q, k, j)
        b.answer(a, j)
    _check_length(conv.id, len(b.ids), max_len, image_len)
    return TurnSequence(conv.id, b.ids, b.mask, list(kinds), b.spans)


def render_caption(conv: Conversation, vocab: Vocab, max_len: int | None = None,
                   image_len: int = 1) -> TurnSequence:
    """Pre-training record: the image followed by its description (first answer)."""
    b = _Builder(vocab)
    b.header(system=False)
    b.answer(conv.turns[0][1], 1)
    _check_length(conv.id, len(b.ids), max_len, image_len)
    return TurnSequence(conv.id, b.ids, b.mask, [], b.spans)


def render_dataset(convs: Iterable[Conversation], policy: SqPolicy, vocab: Vocab, stage: str = "finetune",
                   max_len: int | None = None, image_len: int = 1) -> list[TurnSequence]:
    if stage == "pretrain":
        return [render_caption(c, vocab, max_len, image_len) for c in convs]
    return [render(c, assign_turn_kinds(c, policy), vocab, max_len, image_len) for c in convs]


def generation_prefix(mode: str, vocab: Vocab, prompt_text: str | None = None,
                      history: Sequence[tuple[str, str, str]] = ()) -> list[int]:
    """Token prefix for sampling, built with the same code paths as ``render``.

    ``history`` holds earlier (kind, question, answer) turns of the same
    conversation; with it the prefix equals the training rendering up to the
    point where the new turn's question or answer starts.
    """
    b = _Builder(vocab)
    b.header()
    for j, (k, q, a) in enumerate(history, start=1):
        if k not in (USR, VUSR) or (j == 1 and k != USR):
            raise FormatError(f"bad history turn {j} of kind {k!r}")
        b.turn_opening(q, k, j)
        b.answer(a, j)
    turn = len(history) + 1
    if mode == "answer":
        b.turn_opening(prompt_text or "", USR, turn)
    elif mode == "selfq":
        b.add("prefix", [vocab.vusr], False, turn)
    else:
        raise ValueError(f"unknown generation mode {mode!r}")
    return b.ids


def parse_tokens(conv_id: str, ids: Sequence[int], mask: Sequence[bool], vocab: Vocab) -> TurnSequence:
    """Rebuild spans and turn kinds from a rendered token stream."""
    ids = list(ids)
    b = _Builder(vocab)
    pos = 0

    def take_text() -> list[int]:
        nonlocal pos
        start = pos
        while pos < len(ids) and not vocab.is_special(ids[pos]):
            pos += 1
        return ids[start:pos]

    def expect(tok: int, kind: str, turn: int = -1) -> None:
        nonlocal pos
        if pos >= len(ids) or ids[pos] != tok:
            raise FormatError(f"{conv_id}: expected {kind} token at position {pos}")
        b.add(kind, [tok], turn=turn)
        pos += 1

    expect(vocab.bos, "bos")
    system = take_text()
    if system:
        b.add("system", system)
    expect(vocab.image, "image")
    kinds: list[str] = []
    if not system:
        b.add("answer", take_text(), turn=1)
        expect(vocab.delim, "a_delim", 1)
    else:
        while pos < len(ids):
            j = len(kinds) + 1
            if ids[pos] not in (vocab.usr, vocab.vusr):
                raise FormatError(f"{conv_id}: expected a turn prefix at position {pos}")
            kinds.append(VUSR if ids[pos] == vocab.vusr else USR)
            expect(ids[pos], "prefix", j)
            b.add("question", take_text(), turn=j)
            expect(vocab.delim, "q_delim", j)
            expect(vocab.aswr, "aswr", j)
            b.add("answer", take_text(), turn=j)
            expect(vocab.delim, "a_delim", j)
    if pos != len(ids):
        raise FormatError(f"{conv_id}: trailing tokens after position {pos}")
    return TurnSequence(conv_id, ids, [bool(m) for m in mask], kinds, b.spans)


# ---------------------------------------------------------------------------
# binary record file


def write_records(path: str | Path, seqs: Sequence[TurnSequence]) -> None:
    """Magic, u32 version, u32 count; per record: u32 id length, id bytes,
    u32 token count, u32 LE ids, loss mask packed little-endian into bytes."""
    parts = [RECORD_MAGIC, struct.pack("<II", RECORD_VERSION, len(seqs))]
    for s in seqs:
        cid = s.conv_id.encode("utf-8")
        parts.append(struct.pack("<I", len(cid)) + cid)
        parts.append(struct.pack("<I", len(s.token_ids)))
        parts.append(np.asarray(s.token_ids, dtype="<u4").tobytes())
        parts.append(np.packbits(np.asarray(s.loss_mask, dtype=bool), bitorder="little").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_records(path: str | Path, vocab: Vocab) -> list[TurnSequence]:
    buf = Path(path).read_bytes()
    if buf[:8] != RECORD_MAGIC:
        raise FormatError(f"{path}: not a record file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != RECORD_VERSION:
        raise FormatError(f"{path}: unsupported record version {version}")
    pos, out = 16, []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        cid = buf[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (n_tok,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        ids = np.frombuffer(buf, dtype="<u4", count=n_tok, offset=pos).tolist()
        pos += 4 * n_tok
        n_mask = (n_tok + 7) // 8
        bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=n_mask, offset=pos),
                             bitorder="little")[:n_tok]
        pos += n_mask
        out.append(parse_tokens(cid, ids, bits.astype(bool).tolist(), vocab))
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def debug_dump(seqs: Sequence[TurnSequence], vocab: Vocab) -> str:
    lines = []
    for s in seqs:
        lines.append(f"# {s.conv_id} tokens={len(s)} kinds={','.join(s.turn_kinds) or '-'}")
        for sp in s.spans:
            learn = s.loss_mask[sp.start] if len(sp) else False
            text = vocab.detokenize(s.token_ids[sp.start:sp.end])
            lines.append(f"{sp.kind:<9} turn={sp.turn:<3} [{sp.start}:{sp.end}] "
                         f"loss={'y' if learn else 'n'} {json.dumps(text, ensure_ascii=False)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# corpus statistics


def _summary(xs: list[int]) -> dict:
    if not xs:
        return {"count": 0, "mean": 0.0, "min": 0, "median": 0.0, "max": 0}
    return {"count": len(xs), "mean": statistics.fmean(xs), "min": min(xs),
            "median": float(statistics.median(xs)), "max": max(xs)}


@dataclass
class CorpusStats:
    conversations: int = 0
    turns: int = 0
    drawn_turns: int = 0
    vusr_turns: int = 0
    vusr_fraction: float = 0.0
    total_tokens: int = 0
    masked_tokens: int = 0
    question_lengths: dict = field(default_factory=lambda: _summary([]))
    answer_lengths: dict = field(default_factory=lambda: _summary([]))

    def to_json(self) -> dict:
        return asdict(self)


def corpus_stats(seqs: Sequence[TurnSequence]) -> CorpusStats:
    """Turn counts, self-questioning share (among turns after the first) and lengths."""
    if not seqs:
        return CorpusStats()
    q_len, a_len = [], []
    turns = drawn = vusr = masked = total = 0
    for s in seqs:
        turns += max(len(s.turn_kinds), 1 if any(sp.kind == "answer" for sp in s.spans) else 0)
        drawn += max(len(s.turn_kinds) - 1, 0)
        vusr += s.turn_kinds.count(VUSR)
        masked += sum(s.loss_mask)
        total += len(s)
        q_len += [len(sp) for sp in s.spans if sp.kind == "question"]
        a_len += [len(sp) for sp in s.spans if sp.kind == "answer"]
    return CorpusStats(len(seqs), turns, drawn, vusr, vusr / drawn if drawn else 0.0, total, masked,
                       _summary(q_len), _summary(a_len))

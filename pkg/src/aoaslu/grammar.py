"""Structured target sequences for joint intent detection and slot filling.

An utterance with N tokens and intents/slots is rewritten as

    <intent_1, ..., intent_p, s_1, e_1, slot_1, ..., s_q, e_q, slot_q, EOS>

Spans use 0-indexed inclusive starts and exclusive ends, so ``e`` may equal N.
For an utterance of N tokens the label ids are laid out as::

    0 .. N            pointer positions (N is only legal as an end)
    N+1 .. N+L        categories (intents first, then slot labels)
    N+L+1             EOS
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConversionError, GrammarParseError, VocabularyError


class Span(NamedTuple):
    start: int
    end: int
    label: str


@dataclass
class Utterance:
    tokens: list[str]
    bio_tags: list[str]
    intents: list[str] = field(default_factory=list)
    token_ids: list[int] | None = None

    def __post_init__(self):
        if len(self.tokens) != len(self.bio_tags):
            raise ConversionError(
                f"{len(self.tokens)} tokens but {len(self.bio_tags)} BIO tags"
            )
        if len(set(self.intents)) != len(self.intents):
            raise ConversionError(f"repeated intent in {self.intents}")

    def __len__(self):
        return len(self.tokens)

    @property
    def spans(self) -> list[Span]:
        return spans_from_bio(self.bio_tags)

    def target(self) -> TargetSequence:
        return TargetSequence(tuple(self.intents), tuple(self.spans))


@dataclass(frozen=True)
class TargetSequence:
    intents: tuple[str, ...] = ()
    slots: tuple[Span, ...] = ()

    def validate(self, n_tokens: int) -> None:
        if not self.intents:
            raise ConversionError("target has no intent")
        if len(set(self.intents)) != len(self.intents):
            raise ConversionError(f"repeated intent in {self.intents}")
        prev_end = 0
        for s in self.slots:
            if not 0 <= s.start < s.end <= n_tokens:
                raise ConversionError(f"span {s} out of range for {n_tokens} tokens")
            if s.start < prev_end:
                raise ConversionError(f"span {s} overlaps or is out of order")
            prev_end = s.end

    @property
    def n_labels(self) -> int:
        return len(self.intents) + 3 * len(self.slots) + 1


class LabelVocabulary:
    """Bijective maps between category names and dense ids in ``[0, L)``.

    Intents take ids ``0 .. n_intents-1`` and slot labels follow. The two
    specials sit just outside the category range.
    """

    def __init__(self, intents: Sequence[str], slots: Sequence[str]):
        if not intents:
            raise VocabularyError("label vocabulary needs at least one intent")
        if len(set(intents)) != len(intents) or len(set(slots)) != len(slots):
            raise VocabularyError("duplicate label names")
        self.intents = list(intents)
        self.slots = list(slots)
        self._intent_ids = {name: i for i, name in enumerate(self.intents)}
        self._slot_ids = {name: len(self.intents) + i for i, name in enumerate(self.slots)}
        self.sos_id = self.size
        self.eos_id = self.size + 1

    @classmethod
    def from_corpus(cls, corpus: Iterable[Utterance]) -> LabelVocabulary:
        intents, slots = set(), set()
        for u in corpus:
            intents.update(u.intents)
            slots.update(s.label for s in u.spans)
        return cls(sorted(intents), sorted(slots))

    @property
    def size(self) -> int:
        return len(self.intents) + len(self.slots)

    @property
    def n_intents(self) -> int:
        return len(self.intents)

    @property
    def categories(self) -> list[str]:
        return self.intents + self.slots

    def intent_id(self, name: str) -> int:
        try:
            return self._intent_ids[name]
        except KeyError:
            raise VocabularyError(f"unknown intent {name!r}") from None

    def slot_id(self, name: str) -> int:
        try:
            return self._slot_ids[name]
        except KeyError:
            raise VocabularyError(f"unknown slot label {name!r}") from None

    def name(self, category_id: int) -> str:
        if 0 <= category_id < self.n_intents:
            return self.intents[category_id]
        if self.n_intents <= category_id < self.size:
            return self.slots[category_id - self.n_intents]
        raise VocabularyError(f"category id {category_id} out of range")

    def is_intent(self, category_id: int) -> bool:
        return 0 <= category_id < self.n_intents

    def __eq__(self, other):
        return (isinstance(other, LabelVocabulary)
                and self.intents == other.intents and self.slots == other.slots)


class LabelLayout(NamedTuple):
    """Label-id layout for a pointer range of ``n_positions`` entries."""

    n_positions: int
    n_categories: int

    @classmethod
    def for_tokens(cls, n_tokens: int, vocab: LabelVocabulary) -> LabelLayout:
        return cls(n_tokens + 1, vocab.size)

    @property
    def eos_id(self) -> int:
        return self.n_positions + self.n_categories

    @property
    def size(self) -> int:
        return self.n_positions + self.n_categories + 1

    def category(self, category_id: int) -> int:
        return self.n_positions + category_id

    def split(self, label_id: int) -> tuple[str, int]:
        """Return ``("pos", p)``, ``("cat", c)``, ``("eos", -1)`` or ``("bad", id)``."""
        if 0 <= label_id < self.n_positions:
            return "pos", label_id
        if self.n_positions <= label_id < self.eos_id:
            return "cat", label_id - self.n_positions
        if label_id == self.eos_id:
            return "eos", -1
        return "bad", label_id

    def convert(self, label_id: int, other: LabelLayout) -> int:
        """Map a position, category or EOS id into another layout."""
        kind, value = self.split(label_id)
        if kind == "pos":
            if value >= other.n_positions:
                raise ValueError(f"position {value} does not exist in {other}")
            return value
        if kind == "cat":
            return other.category(value)
        if kind == "eos":
            return other.eos_id
        raise ValueError(f"label id {label_id} outside {self}")


def spans_from_bio(tags: Sequence[str]) -> list[Span]:
    """Strict BIO decoding; ill-formed sequences raise ``ConversionError``."""
    spans: list[Span] = []
    start, label = None, None
    for i, tag in enumerate(tags):
        if tag == "O":
            if start is not None:
                spans.append(Span(start, i, label))
            start, label = None, None
            continue
        prefix, sep, name = tag.partition("-")
        if not sep or not name or prefix not in ("B", "I"):
            raise ConversionError(f"invalid BIO tag {tag!r} at position {i}")
        if prefix == "B":
            if start is not None:
                spans.append(Span(start, i, label))
            start, label = i, name
        elif start is None or label != name:
            raise ConversionError(f"{tag!r} at position {i} does not continue a {name} span")
    if start is not None:
        spans.append(Span(start, len(tags), label))
    return spans


def bio_from_spans(spans: Iterable[Span], n_tokens: int) -> list[str]:
    tags = ["O"] * n_tokens
    for s in sorted(spans, key=lambda s: s[0]):
        start, end, label = s
        if not 0 <= start < end <= n_tokens:
            raise ConversionError(f"span {tuple(s)} out of range for {n_tokens} tokens")
        if any(t != "O" for t in tags[start:end]):
            raise ConversionError(f"span {tuple(s)} overlaps another span")
        tags[start] = f"B-{label}"
        for i in range(start + 1, end):
            tags[i] = f"I-{label}"
    return tags


def bio_problems(tags: Sequence[str]) -> list[str]:
    """Lint helper: a list of human-readable BIO violations (empty if clean)."""
    try:
        spans_from_bio(tags)
    except ConversionError as exc:
        return [str(exc)]
    return []


def encode_target(u: Utterance, vocab: LabelVocabulary) -> list[int]:
    """Label ids for ``u``: intents in annotation order, spans by start, EOS."""
    return target_ids(u.target(), len(u.tokens), vocab)


def target_ids(target: TargetSequence, n_tokens: int, vocab: LabelVocabulary) -> list[int]:
    target.validate(n_tokens)
    layout = LabelLayout.for_tokens(n_tokens, vocab)
    seq = [layout.category(vocab.intent_id(name)) for name in target.intents]
    for s in target.slots:
        seq.extend((s.start, s.end, layout.category(vocab.slot_id(s.label))))
    seq.append(layout.eos_id)
    return seq


def decode_target(seq: Sequence[int], n_tokens: int, vocab: LabelVocabulary) -> TargetSequence:
    """Parse ``intents+ (start end slot)* EOS`` into a :class:`TargetSequence`.

    Any grammar violation raises :class:`GrammarParseError` whose ``prefix``
    is the longest valid prefix (complete intents and triplets only).
    """
    layout = LabelLayout.for_tokens(n_tokens, vocab)
    intents: list[str] = []
    slots: list[Span] = []

    def fail(msg, i):
        raise GrammarParseError(msg, TargetSequence(tuple(intents), tuple(slots)), i)

    i = 0
    n = len(seq)
    while i < n:
        kind, value = layout.split(int(seq[i]))
        if kind != "cat" or not vocab.is_intent(value):
            break
        name = vocab.name(value)
        if name in intents:
            fail(f"intent {name!r} repeated", i)
        intents.append(name)
        i += 1
    if not intents:
        fail("sequence does not start with an intent", 0)
    prev_end = 0
    while True:
        if i >= n:
            fail("sequence ended without EOS", i)
        kind, value = layout.split(int(seq[i]))
        if kind == "eos":
            if i != n - 1:
                fail("labels after EOS", i + 1)
            return TargetSequence(tuple(intents), tuple(slots))
        if kind == "cat":
            what = "intent after slots" if vocab.is_intent(value) else "slot label without positions"
            fail(what, i)
        if kind != "pos":
            fail(f"label id {value} outside the label range", i)
        start = value
        if start >= n_tokens:
            fail(f"start position {start} is past the last token", i)
        if start < prev_end:
            fail(f"span starting at {start} overlaps or precedes the previous span", i)
        if i + 1 >= n:
            fail("dangling start position", i + 1)
        kind, end = layout.split(int(seq[i + 1]))
        if kind != "pos":
            fail("expected an end position", i + 1)
        if end <= start:
            fail(f"end {end} is not after start {start}", i + 1)
        if i + 2 >= n:
            fail("dangling position pair", i + 2)
        kind, value = layout.split(int(seq[i + 2]))
        if kind != "cat" or vocab.is_intent(value):
            fail("expected a slot label after a position pair", i + 2)
        slots.append(Span(start, end, vocab.name(value)))
        prev_end = end
        i += 3


EXPECT_INTENT = "expect-intent"
INTENT_OR_START = "intent-or-start"
EXPECT_END = "expect-end"
EXPECT_CATEGORY = "expect-category"
START_OR_EOS = "start-or-eos"
DONE = "done"


class GrammarState:
    """Automaton over the target grammar, used for constrained decoding.

    Starts are additionally constrained to lie at or after the previous
    span's end, so every accepted sequence has sorted, disjoint spans.
    """

    def __init__(self, n_tokens: int, vocab: LabelVocabulary):
        self.n_tokens = n_tokens
        self.vocab = vocab
        self.layout = LabelLayout.for_tokens(n_tokens, vocab)
        self.phase = EXPECT_INTENT
        self.intents_seen: set[int] = set()
        self.start = -1
        self.min_start = 0

    def copy(self) -> GrammarState:
        other = GrammarState.__new__(GrammarState)
        other.__dict__.update(self.__dict__)
        other.intents_seen = set(self.intents_seen)
        return other

    def mask(self) -> np.ndarray:
        lay, vocab = self.layout, self.vocab
        m = np.zeros(lay.size, dtype=bool)
        phase = self.phase
        if phase in (EXPECT_INTENT, INTENT_OR_START):
            m[lay.n_positions:lay.n_positions + vocab.n_intents] = True
            for c in self.intents_seen:
                m[lay.category(c)] = False
        if phase in (INTENT_OR_START, START_OR_EOS):
            if vocab.slots:
                m[self.min_start:self.n_tokens] = True
            m[lay.eos_id] = True
        elif phase == EXPECT_END:
            m[self.start + 1:self.n_tokens + 1] = True
        elif phase == EXPECT_CATEGORY:
            m[lay.n_positions + vocab.n_intents:lay.eos_id] = True
        return m

    def advance(self, label_id: int) -> None:
        label_id = int(label_id)
        if self.phase == DONE or not 0 <= label_id < self.layout.size or not self.mask()[label_id]:
            raise GrammarParseError(f"label {label_id} illegal in phase {self.phase}")
        kind, value = self.layout.split(label_id)
        if kind == "eos":
            self.phase = DONE
        elif self.phase in (EXPECT_INTENT, INTENT_OR_START) and kind == "cat":
            self.intents_seen.add(value)
            self.phase = INTENT_OR_START
        elif self.phase == EXPECT_END:
            self.min_start = value
            self.phase = EXPECT_CATEGORY
        elif self.phase == EXPECT_CATEGORY:
            self.phase = START_OR_EOS
        else:
            self.start = value
            self.phase = EXPECT_END

    @property
    def done(self) -> bool:
        return self.phase == DONE


def grammar_mask(state: GrammarState) -> np.ndarray:
    """Boolean vector over the utterance's label layout: True = legal next label."""
    return state.mask()

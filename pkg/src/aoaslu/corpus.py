"""Corpus and prediction files, plus the word-level tokenizer.

Corpus format, per sample::

    token<TAB>bio-tag        (one line per token)
    #intents<TAB>I1#I2#...   (terminator)

with one blank line between samples. Prediction files hold one line per
utterance: ``intent1#intent2<TAB>start:end:label;start:end:label``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConversionError, CorpusParseError
from .grammar import Span, TargetSequence, Utterance, bio_problems
from .model import EOS_ID, PAD_ID, SOS_ID, UNK_ID

log = logging.getLogger(__name__)

INTENT_MARKER = "#intents"


class Tokenizer:
    SPECIALS = ("<pad>", "<unk>", "<sos>", "<eos>")

    def __init__(self, words: Iterable[str] = (), lowercase: bool = True):
        self.lowercase = lowercase
        self._words = list(self.SPECIALS)
        self._ids = {w: i for i, w in enumerate(self._words)}
        for w in words:
            w = w.lower() if lowercase else w
            if w not in self._ids:
                self._ids[w] = len(self._words)
                self._words.append(w)
        assert (self._ids["<pad>"], self._ids["<unk>"], self._ids["<sos>"], self._ids["<eos>"]) == (
            PAD_ID, UNK_ID, SOS_ID, EOS_ID)

    @classmethod
    def build(cls, corpus: Iterable[Utterance], lowercase: bool = True) -> Tokenizer:
        words = []
        for u in corpus:
            words.extend(u.tokens)
        return cls(words, lowercase)

    def __len__(self):
        return len(self._words)

    def __eq__(self, other):
        return isinstance(other, Tokenizer) and self._words == other._words and self.lowercase == other.lowercase

    def _norm(self, word):
        return word.lower() if self.lowercase else word

    def get(self, word: str) -> int | None:
        return self._ids.get(self._norm(word))

    def id(self, word: str) -> int:
        return self._ids.get(self._norm(word), UNK_ID)

    def word(self, idx: int) -> str:
        return self._words[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    @property
    def words(self) -> list[str]:
        return list(self._words)

    def save(self, path) -> None:
        body = "".join(w + "\n" for w in self._words[len(self.SPECIALS):])
        Path(path).write_text(f"lowercase={int(self.lowercase)}\n" + body, encoding="utf-8")

    @classmethod
    def load(cls, path) -> Tokenizer:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if not lines or not lines[0].startswith("lowercase="):
            raise CorpusParseError(f"{path}: missing tokenizer header", 1)
        words = lines[1:-1] if lines[-1] == "" else lines[1:]
        tok = cls(lowercase=lines[0] == "lowercase=1")
        for w in words:
            tok._ids[w] = len(tok._words)
            tok._words.append(w)
        return tok


@dataclass
class LintReport:
    entries: list[tuple[int, str]] = field(default_factory=list)

    def add(self, line: int, message: str):
        self.entries.append((line, message))

    def __bool__(self):
        return bool(self.entries)

    def __str__(self):
        return "\n".join(f"line {ln}: {msg}" for ln, msg in self.entries)


def read_corpus(path, strict: bool = False, lint: LintReport | None = None) -> list[Utterance]:
    """Read a corpus file.

    Malformed records raise :class:`CorpusParseError` with a line number. BIO
    violations are recorded in ``lint`` and the record is skipped, unless
    ``strict`` is set, in which case they raise.
    """
    lint = lint if lint is not None else LintReport()
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        log.warning("%s: empty corpus", path)
        return []
    corpus: list[Utterance] = []
    tokens: list[str] = []
    tags: list[str] = []
    first_line = None
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            if tokens:
                raise CorpusParseError("sample has no #intents terminator", first_line)
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusParseError(f"expected two tab-separated fields, got {line!r}", lineno)
        if parts[0] == INTENT_MARKER:
            if not tokens:
                raise CorpusParseError("#intents line without tokens", lineno)
            intents = [i for i in parts[1].split("#")] if parts[1] else []
            problems = bio_problems(tags)
            if len(set(intents)) != len(intents) or any(not i for i in intents):
                problems.append(f"bad intent list {parts[1]!r}")
            if problems:
                if strict:
                    raise CorpusParseError("; ".join(problems), first_line)
                for p in problems:
                    lint.add(first_line, p)
            else:
                corpus.append(Utterance(tokens, tags, intents))
            tokens, tags, first_line = [], [], None
            continue
        if first_line is None:
            first_line = lineno
        tokens.append(parts[0])
        tags.append(parts[1])
    if tokens:
        raise CorpusParseError("last sample has no #intents terminator", first_line)
    if lint:
        log.warning("%s: %d lint entries\n%s", path, len(lint.entries), lint)
    return corpus


def _check_field(value: str, what: str, extra: str = "") -> None:
    if not value or value != value.strip() or any(c in value for c in "\t\n\r" + extra):
        raise ConversionError(f"{what} {value!r} cannot be written to a corpus file")


def format_corpus(corpus: Iterable[Utterance]) -> str:
    blocks = []
    for u in corpus:
        if len(u.tokens) != len(u.bio_tags):
            raise ConversionError("token/tag length mismatch")
        for tok in u.tokens:
            _check_field(tok, "token")
            if tok == INTENT_MARKER:
                raise ConversionError(f"token {tok!r} collides with the intent marker")
        for intent in u.intents:
            _check_field(intent, "intent", "#")
        if not u.tokens or not u.intents:
            raise ConversionError("corpus records need at least one token and one intent")
        lines = [f"{tok}\t{tag}" for tok, tag in zip(u.tokens, u.bio_tags)]
        lines.append(f"{INTENT_MARKER}\t{'#'.join(u.intents)}")
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def write_corpus(corpus: Iterable[Utterance], path) -> None:
    Path(path).write_text(format_corpus(corpus), encoding="utf-8", newline="\n")


def format_prediction(target: TargetSequence) -> str:
    slots = ";".join(f"{s.start}:{s.end}:{s.label}" for s in target.slots)
    return f"{'#'.join(target.intents)}\t{slots}"


def parse_prediction(line: str, lineno: int | None = None) -> TargetSequence:
    intents_part, sep, slots_part = line.partition("\t")
    if not sep:
        raise CorpusParseError(f"prediction line needs a tab: {line!r}", lineno)
    intents = tuple(i for i in intents_part.split("#") if i)
    slots = []
    for item in filter(None, slots_part.split(";")):
        start, _, rest = item.partition(":")
        end, _, label = rest.partition(":")
        try:
            slots.append(Span(int(start), int(end), label))
        except ValueError:
            raise CorpusParseError(f"bad slot triplet {item!r}", lineno) from None
    return TargetSequence(intents, tuple(slots))


def write_predictions(targets: Iterable[TargetSequence], path) -> None:
    Path(path).write_text("".join(format_prediction(t) + "\n" for t in targets), encoding="utf-8", newline="\n")


def read_predictions(path) -> list[TargetSequence]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [parse_prediction(line, i) for i, line in enumerate(lines, 1)]

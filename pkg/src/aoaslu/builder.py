"""Multi-intent corpus construction by coherence-filtered concatenation.

For every single-intent source utterance a target intent count n is sampled.
While n > 1, candidates whose intent is not yet present are scanned in a
seeded random order and the first one whose coherence score with the current
utterance exceeds ``tau`` is appended after a conjunction. The output has one
utterance per source utterance.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import stats

from .errors import BuilderError, ScorerError
from .grammar import Span, Utterance, spans_from_bio

log = logging.getLogger(__name__)

DEFAULT_STOPWORDS = (
    "a", "an", "the", "to", "of", "in", "on", "at", "for", "my", "me", "i", "is", "it",
    "and", "then", "also", "by", "be", "what", "will", "some", "please", "called", "this",
)
DEFAULT_AFFINITY = 0.1


@dataclass
class BuilderConfig:
    tau: float = 0.5
    intent_count_probs: tuple = (0.3, 0.5, 0.2)
    conjunctions: tuple = (("and", 1.0), ("and then", 1.0), ("and also", 1.0))
    max_scans: int = 200
    seed: int = 0
    scorer: str = "heuristic"
    constant_score: float = 0.5
    endpoint: str = ""
    affinity_path: str = ""
    stopwords: tuple = DEFAULT_STOPWORDS
    scorer_retries: int = 1
    dedup: bool = False
    workers: int = 1

    def __post_init__(self):
        probs = np.asarray(self.intent_count_probs, dtype=float)
        if probs.ndim != 1 or len(probs) < 1 or (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise BuilderError(f"intent-count probabilities must be non-negative and sum to 1, got {self.intent_count_probs}")
        if not self.conjunctions:
            raise BuilderError("conjunction pool is empty")
        if any(w < 0 for _, w in self.conjunctions) or sum(w for _, w in self.conjunctions) <= 0:
            raise BuilderError("conjunction weights must be non-negative with a positive total")
        if not 0.0 <= self.tau <= 1.0:
            raise BuilderError(f"tau must lie in [0, 1], got {self.tau}")
        if self.scorer not in ("remote", "heuristic", "constant"):
            raise BuilderError(f"unknown scorer {self.scorer!r}")
        if self.max_scans < 1:
            raise BuilderError("max_scans must be positive")


class CoherenceScorer(Protocol):
    def score(self, u_a: Utterance, u_b: Utterance) -> float: ...


class ConstantScorer:
    def __init__(self, value: float = 0.5):
        if not 0.0 <= value <= 1.0:
            raise BuilderError(f"constant score must lie in [0, 1], got {value}")
        self.value = value

    def score(self, u_a, u_b):
        return self.value


class HeuristicScorer:
    """0.5 * mean intent affinity + 0.5 * Jaccard of content words, clamped to [0, 1]."""

    def __init__(self, affinity: dict[tuple[str, str], float], stopwords=DEFAULT_STOPWORDS,
                 default: float = DEFAULT_AFFINITY):
        self.affinity = dict(affinity)
        for (a, b), v in list(self.affinity.items()):
            self.affinity.setdefault((b, a), v)
        self.stopwords = frozenset(w.lower() for w in stopwords)
        self.default = default

    def _content(self, u):
        return {t.lower() for t in u.tokens} - self.stopwords

    def score(self, u_a, u_b):
        pairs = [(a, b) for a in u_a.intents for b in u_b.intents]
        aff = float(np.mean([self.affinity.get(p, self.default) for p in pairs])) if pairs else 0.0
        wa, wb = self._content(u_a), self._content(u_b)
        union = wa | wb
        jac = len(wa & wb) / len(union) if union else 0.0
        return min(1.0, max(0.0, 0.5 * aff + 0.5 * jac))


class RemoteScorer:
    """Client for an HTTP next-sentence-probability service.

    POSTs ``{"sentence_a": ..., "sentence_b": ...}`` and expects
    ``{"score": r}`` with r in [0, 1]. Responses are cached per input pair.
    """

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 3, backoff: float = 0.5):
        if not endpoint:
            raise BuilderError("remote scorer needs an endpoint URL")
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.requests_sent = 0
        self._cache: dict[str, float] = {}
        self._lock = threading.Lock()

    def _post(self, body: bytes) -> dict:
        req = urllib.request.Request(self.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def score(self, u_a, u_b):
        body = json.dumps({"sentence_a": " ".join(u_a.tokens), "sentence_b": " ".join(u_b.tokens)}).encode("utf-8")
        key = hashlib.sha256(body).hexdigest()
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        last = None
        for attempt in range(self.retries + 1):
            try:
                with self._lock:
                    self.requests_sent += 1
                payload = self._post(body)
                break
            except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
        else:
            raise ScorerError(f"remote scorer failed after {self.retries + 1} attempts: {last}")
        value = payload.get("score") if isinstance(payload, dict) else None
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
            raise ScorerError(f"protocol error: score {value!r} is not a number in [0, 1]")
        with self._lock:
            self._cache[key] = float(value)
        return float(value)


def read_affinity(path) -> dict[tuple[str, str], float]:
    table = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise BuilderError(f"{path}:{lineno}: expected intentA<TAB>intentB<TAB>value")
        value = float(parts[2])
        if not 0.0 <= value <= 1.0:
            raise BuilderError(f"{path}:{lineno}: affinity {value} outside [0, 1]")
        table[(parts[0], parts[1])] = value
        table.setdefault((parts[1], parts[0]), value)
    return table


def write_affinity(table, path) -> None:
    lines = [f"{a}\t{b}\t{v!r}" for (a, b), v in sorted(table.items())]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def make_scorer(cfg: BuilderConfig) -> CoherenceScorer:
    if cfg.scorer == "constant":
        return ConstantScorer(cfg.constant_score)
    if cfg.scorer == "remote":
        return RemoteScorer(cfg.endpoint)
    affinity = read_affinity(cfg.affinity_path) if cfg.affinity_path else {}
    return HeuristicScorer(affinity, cfg.stopwords)


def concat_samples(u_m: Utterance, u_c: Utterance, conjunction: str = "and") -> Utterance:
    """``u_m`` + conjunction (tagged O) + ``u_c`` with ``u_c``'s spans shifted."""
    if set(u_m.intents) & set(u_c.intents):
        raise BuilderError(f"intent overlap between {u_m.intents} and {u_c.intents}")
    conj = conjunction.split()
    shift = len(u_m.tokens) + len(conj)
    merged = Utterance(
        tokens=list(u_m.tokens) + conj + list(u_c.tokens),
        bio_tags=list(u_m.bio_tags) + ["O"] * len(conj) + list(u_c.bio_tags),
        intents=list(u_m.intents) + list(u_c.intents),
    )
    expected = list(u_m.spans) + [Span(s.start + shift, s.end + shift, s.label) for s in u_c.spans]
    assert spans_from_bio(merged.bio_tags) == expected
    return merged


@dataclass
class AuditRecord:
    utterance_id: int
    candidate_id: int
    score: float
    accepted: bool

    def line(self) -> str:
        return f"{self.utterance_id}\t{self.candidate_id}\t{self.score!r}\t{int(self.accepted)}"


AUDIT_HEADER = "utterance_id\tcandidate_id\tscore\taccepted"


@dataclass
class BuildResult:
    corpus: list[Utterance]
    audit: list[AuditRecord] = field(default_factory=list)
    shortfalls: int = 0

    def write_audit(self, path) -> None:
        Path(path).write_text(AUDIT_HEADER + "\n" + "".join(r.line() + "\n" for r in self.audit), encoding="utf-8")


def _score_with_retry(scorer, u_m, u_c, retries):
    for attempt in range(retries + 1):
        try:
            return scorer.score(u_m, u_c)
        except ScorerError as exc:
            if attempt == retries:
                log.warning("scorer failed, skipping candidate: %s", exc)
    return None


def build(source: Sequence[Utterance], cfg: BuilderConfig, scorer: CoherenceScorer) -> BuildResult:
    """Generate one multi-intent utterance per source utterance."""
    source = list(source)
    if not source:
        raise BuilderError("source corpus is empty")
    for i, u in enumerate(source):
        if len(u.intents) != 1:
            raise BuilderError(f"source utterance {i} has {len(u.intents)} intents; exactly one required")
    by_intent: dict[str, list[int]] = {}
    for i, u in enumerate(source):
        by_intent.setdefault(u.intents[0], []).append(i)
    if len(by_intent) < 2:
        raise BuilderError("source corpus needs at least two distinct intents")

    counts = np.arange(1, len(cfg.intent_count_probs) + 1)
    probs = np.asarray(cfg.intent_count_probs, dtype=float)
    conj_words = [c for c, _ in cfg.conjunctions]
    conj_p = np.array([w for _, w in cfg.conjunctions], dtype=float)
    conj_p /= conj_p.sum()
    by_intent_arrays = {k: np.array(v) for k, v in by_intent.items()}

    def derive(idx):
        rng = np.random.default_rng([cfg.seed, idx])
        n = int(rng.choice(counts, p=probs))
        u_m = source[idx]
        audit, shortfall = [], 0
        while n > 1:
            pool = [by_intent_arrays[k] for k in by_intent_arrays if k not in u_m.intents]
            accepted = False
            if pool:
                cands = np.concatenate(pool)
                picks = rng.choice(len(cands), size=min(cfg.max_scans, len(cands)), replace=False)
                for k in picks:
                    j = int(cands[k])
                    score = _score_with_retry(scorer, u_m, source[j], cfg.scorer_retries)
                    if score is None:
                        continue
                    ok = score > cfg.tau
                    audit.append(AuditRecord(idx, j, score, ok))
                    if ok:
                        conj = conj_words[int(rng.choice(len(conj_words), p=conj_p))]
                        u_m = concat_samples(u_m, source[j], conj)
                        accepted = True
                        break
            if not accepted:
                shortfall += 1
            n -= 1
        return u_m, audit, shortfall

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(derive, range(len(source))))
    else:
        results = [derive(i) for i in range(len(source))]
    corpus = [r[0] for r in results]
    audit = [a for r in results for a in r[1]]
    shortfalls = sum(r[2] for r in results)
    if shortfalls:
        log.info("%d requested concatenations found no candidate above tau=%g", shortfalls, cfg.tau)
    if cfg.dedup:
        seen, unique = set(), []
        for u in corpus:
            key = (tuple(u.tokens), tuple(u.bio_tags), tuple(u.intents))
            if key not in seen:
                seen.add(key)
                unique.append(u)
        corpus = unique
    return BuildResult(corpus, audit, shortfalls)


def split_then_build(source: Sequence[Utterance], fractions: Sequence[float], cfg: BuilderConfig,
                     scorer: CoherenceScorer) -> list[BuildResult]:
    """Split the source first, then build each split independently (no source leakage)."""
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(source))
    bounds = np.cumsum(np.asarray(fractions) / np.sum(fractions) * len(source)).round().astype(int)
    parts, start = [], 0
    for end in bounds:
        parts.append([source[i] for i in order[start:end]])
        start = end
    return [build(p, cfg, scorer) for p in parts]


@dataclass
class CooccurrenceReport:
    intents: list[str]
    counts: np.ndarray
    chi2: np.ndarray
    p_values: np.ndarray

    def to_text(self) -> str:
        lines = ["intent\t" + "\t".join(self.intents)]
        for name, row in zip(self.intents, self.counts):
            lines.append(name + "\t" + "\t".join(str(int(c)) for c in row))
        lines.append("")
        lines.append("intent\tchi2\tp_value")
        for name, c, p in zip(self.intents, self.chi2, self.p_values):
            lines.append(f"{name}\t{c:.6g}\t{p:.6g}")
        return "\n".join(lines) + "\n"


def cooccurrence_matrix(corpus: Sequence[Utterance]) -> CooccurrenceReport:
    """Pairwise within-utterance intent co-occurrence plus per-row uniformity tests.

    Each row's off-diagonal counts are tested against a uniform distribution
    with a chi-square goodness-of-fit test (NaN for rows without counts).
    """
    intents = sorted({i for u in corpus for i in u.intents})
    index = {name: k for k, name in enumerate(intents)}
    K = len(intents)
    counts = np.zeros((K, K), dtype=np.int64)
    for u in corpus:
        ids = [index[i] for i in u.intents]
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                counts[ids[a], ids[b]] += 1
                counts[ids[b], ids[a]] += 1
    chi2 = np.full(K, np.nan)
    pv = np.full(K, np.nan)
    for k in range(K):
        row = np.delete(counts[k], k)
        if K > 2 and row.sum() > 0:
            res = stats.chisquare(row)
            chi2[k], pv[k] = res.statistic, res.pvalue
    return CooccurrenceReport(intents, counts, chi2, pv)

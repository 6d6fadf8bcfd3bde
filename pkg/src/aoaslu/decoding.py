"""Greedy autoregressive inference with grammar-constrained label selection."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import GrammarParseError
from .grammar import GrammarState, LabelLayout, LabelVocabulary, TargetSequence, Utterance, decode_target
from .model import DecoderCache, ModelConfig, ModelParams, decode_hidden, encode_batch, pointer_logits, position_mask

log = logging.getLogger(__name__)

MAX_STEPS_CAP = 64


def default_max_steps(max_intents: int, max_slots: int) -> int:
    return min(MAX_STEPS_CAP, 2 + 3 * max_intents + 3 * max_slots)


def max_steps_for(corpus) -> int:
    corpus = list(corpus)
    if not corpus:
        return MAX_STEPS_CAP
    return default_max_steps(max(len(u.intents) for u in corpus), max(len(u.spans) for u in corpus))


@dataclass
class Prediction:
    """Generated labels for one utterance, in that utterance's label layout.

    ``target`` is the parse, or the longest valid prefix when generation hit
    ``max_steps`` (``truncated``) or produced an ungrammatical sequence
    (``error`` set; only possible with constraints off).
    """

    labels: list[int]
    target: TargetSequence
    truncated: bool = False
    error: GrammarParseError | None = None

    @property
    def malformed(self) -> bool:
        return self.error is not None and not self.truncated

    def scored(self) -> TargetSequence:
        """Target used for metrics; malformed output counts as predicting nothing."""
        return TargetSequence() if self.malformed else self.target


@dataclass
class DecodeState:
    """Incremental state for a batch of generations."""

    emitted: list[list[int]]
    grammar: list[GrammarState]
    cache: DecoderCache | None
    finished: np.ndarray
    t: int = 0
    history: list[np.ndarray] = field(default_factory=list)


def generate_batch(batch_ids, params: ModelParams, cfg: ModelConfig, vocab: LabelVocabulary,
                   max_steps: int = MAX_STEPS_CAP, constrained: bool = True,
                   use_cache: bool = True) -> list[Prediction]:
    """Greedy decoding for several utterances at once.

    Each step embeds the previous label (position -> pointed token,
    category -> category embedding), runs the decoder, masks illegal labels
    to -inf and takes the argmax (lowest id on ties).
    """
    if max_steps < 2:
        raise ValueError("max_steps must be at least 2")
    if not batch_ids:
        return []
    enc = encode_batch(batch_ids, params, cfg)
    B = len(batch_ids)
    L = vocab.size
    batch_layout = LabelLayout(enc.n_positions, L)
    layouts = [LabelLayout.for_tokens(len(ids), vocab) for ids in batch_ids]
    exists = position_mask(enc, L)
    state = DecodeState(
        emitted=[[] for _ in range(B)],
        grammar=[GrammarState(len(ids), vocab) for ids in batch_ids],
        cache=DecoderCache.empty(cfg) if use_cache else None,
        finished=np.zeros(B, dtype=bool),
        history=[np.full(B, -1, dtype=np.intp)],
    )
    S = batch_layout.n_positions
    for _ in range(max_steps):
        if use_cache:
            prev = state.history[-1][:, None]
        else:
            prev = np.stack(state.history, axis=1)
        h = decode_hidden(prev, enc, params, cfg, state.cache)
        h = h[:, -1:, :]
        logits = pointer_logits(h, enc, params, cfg).data[:, 0, :]
        mask = exists.copy()
        if constrained:
            for b in range(B):
                if state.finished[b]:
                    continue
                m = state.grammar[b].mask()
                n_pos = layouts[b].n_positions
                mask[b, :] = False
                mask[b, :n_pos] = m[:n_pos]
                mask[b, S:] = m[n_pos:]
        choice = np.where(mask, logits, -np.inf).argmax(axis=1)
        state.t += 1
        feed = np.full(B, -1, dtype=np.intp)
        for b in range(B):
            if state.finished[b]:
                continue
            c = int(choice[b])
            label = batch_layout.convert(c, layouts[b])
            state.emitted[b].append(label)
            if constrained:
                state.grammar[b].advance(label)
            if c == batch_layout.eos_id:
                state.finished[b] = True
            else:
                feed[b] = c
        state.history.append(feed)
        if state.finished.all():
            break

    out = []
    for b, ids in enumerate(batch_ids):
        labels = state.emitted[b]
        try:
            out.append(Prediction(labels, decode_target(labels, len(ids), vocab)))
        except GrammarParseError as exc:
            out.append(Prediction(labels, exc.prefix, truncated=not state.finished[b], error=exc))
    return out


def greedy_generate(u: Utterance, params: ModelParams, cfg: ModelConfig, vocab: LabelVocabulary,
                    max_steps: int = MAX_STEPS_CAP, constrained: bool = True,
                    use_cache: bool = True) -> Prediction:
    return generate_batch([u.token_ids], params, cfg, vocab, max_steps, constrained, use_cache)[0]


def predict_batch(corpus, params: ModelParams, cfg: ModelConfig, vocab: LabelVocabulary,
                  max_steps: int = MAX_STEPS_CAP, constrained: bool = True, workers: int = 1,
                  chunk_size: int = 32) -> list[tuple[Utterance, Prediction]]:
    """Order-preserving prediction over a corpus.

    The corpus is cut into fixed ``chunk_size`` chunks independent of
    ``workers``, so serial and threaded runs give identical results.
    """
    corpus = list(corpus)
    if not corpus:
        return []
    chunks = [corpus[i:i + chunk_size] for i in range(0, len(corpus), chunk_size)]

    def run(chunk):
        return generate_batch([u.token_ids for u in chunk], params, cfg, vocab, max_steps, constrained)

    start = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    elapsed = time.perf_counter() - start
    preds = [p for chunk in results for p in chunk]
    log.info("predicted %d utterances in %.2fs (%.1f utterances/s)", len(corpus), elapsed,
             len(corpus) / max(elapsed, 1e-9))
    truncated = sum(p.truncated for p in preds)
    if truncated:
        log.warning("%d generations hit max_steps=%d", truncated, max_steps)
    return list(zip(corpus, preds))

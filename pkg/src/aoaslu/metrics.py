"""Slot F1, intent accuracy and overall (sentence-level) accuracy.

Slot F1 is micro-averaged over exact (start, end, label) matches with
multiplicity. Intent accuracy requires the predicted intent set to equal the
gold set; overall accuracy additionally requires the slot multisets to match.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .errors import AlignmentError
from .grammar import TargetSequence

SEMANTICS_NOTE = "intent_accuracy=exact-set-match"


def _aligned(gold, pred):
    if len(gold) != len(pred):
        raise AlignmentError(f"{len(gold)} gold items but {len(pred)} predictions")


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def slot_counts(gold: Sequence, pred: Sequence) -> tuple[int, int, int]:
    _aligned(gold, pred)
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        gc, pc = Counter(map(tuple, g)), Counter(map(tuple, p))
        hit = sum((gc & pc).values())
        tp += hit
        fp += sum(pc.values()) - hit
        fn += sum(gc.values()) - hit
    return tp, fp, fn


def slot_f1(gold: Sequence, pred: Sequence) -> tuple[float, float, float]:
    """(precision, recall, F1) over per-utterance span collections."""
    return _prf(*slot_counts(gold, pred))


def intent_accuracy(gold: Sequence, pred: Sequence) -> float:
    _aligned(gold, pred)
    if not gold:
        return 0.0
    return sum(set(g) == set(p) for g, p in zip(gold, pred)) / len(gold)


def _exact(g: TargetSequence, p: TargetSequence) -> bool:
    return set(g.intents) == set(p.intents) and Counter(map(tuple, g.slots)) == Counter(map(tuple, p.slots))


def overall_accuracy(gold: Sequence[TargetSequence], pred: Sequence[TargetSequence]) -> float:
    _aligned(gold, pred)
    if not gold:
        return 0.0
    return sum(_exact(g, p) for g, p in zip(gold, pred)) / len(gold)


@dataclass
class EvalReport:
    slot_precision: float
    slot_recall: float
    slot_f1: float
    intent_accuracy: float
    overall_accuracy: float
    slot_tp: int
    slot_fp: int
    slot_fn: int
    n_utterances: int
    n_intent_correct: int
    n_overall_correct: int
    by_intent_count: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["by_intent_count"] = {str(k): v for k, v in sorted(self.by_intent_count.items())}
        return d

    def to_json(self) -> str:
        return json.dumps({"semantics": SEMANTICS_NOTE, **self.to_dict()}, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"# {SEMANTICS_NOTE}"]
        for k, v in self.to_dict().items():
            if k == "by_intent_count":
                continue
            lines.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
        for n, sub in sorted(self.by_intent_count.items()):
            for k, v in sub.items():
                lines.append(f"intents_{n}.{k}={v:.6f}" if isinstance(v, float) else f"intents_{n}.{k}={v}")
        return "\n".join(lines) + "\n"


def evaluate(gold: Sequence[TargetSequence], pred: Sequence[TargetSequence]) -> EvalReport:
    _aligned(gold, pred)
    gold_slots = [g.slots for g in gold]
    pred_slots = [p.slots for p in pred]
    tp, fp, fn = slot_counts(gold_slots, pred_slots)
    p, r, f = _prf(tp, fp, fn)
    n_int = sum(set(g.intents) == set(q.intents) for g, q in zip(gold, pred))
    n_all = sum(_exact(g, q) for g, q in zip(gold, pred))
    n = len(gold)

    buckets: dict[int, list[int]] = {}
    for i, g in enumerate(gold):
        buckets.setdefault(len(g.intents), []).append(i)
    by_count = {}
    for k, idx in sorted(buckets.items()):
        gs = [gold[i] for i in idx]
        ps = [pred[i] for i in idx]
        _, _, bf = slot_f1([g.slots for g in gs], [q.slots for q in ps])
        by_count[k] = {
            "n_utterances": len(idx),
            "slot_f1": bf,
            "intent_accuracy": intent_accuracy([g.intents for g in gs], [q.intents for q in ps]),
            "overall_accuracy": overall_accuracy(gs, ps),
        }
    return EvalReport(
        slot_precision=p, slot_recall=r, slot_f1=f,
        intent_accuracy=n_int / n if n else 0.0,
        overall_accuracy=n_all / n if n else 0.0,
        slot_tp=tp, slot_fp=fp, slot_fn=fn,
        n_utterances=n, n_intent_correct=n_int, n_overall_correct=n_all,
        by_intent_count=by_count,
    )

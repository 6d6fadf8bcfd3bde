"""Central finite-difference check of the full training loss in 64-bit precision.

The analytic gradient comes from the tape; the numeric one only ever calls
the forward pass, so the two paths share no backward code.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .grammar import LabelVocabulary, Utterance, bio_from_spans
from .model import ModelConfig, init_params
from .synthetic import random_target

# Denominator floor for the relative error. Central-difference round-off is
# about eps * |loss| / h ~ 2e-11 at h=1e-5; key-projection biases have an
# exactly zero gradient (softmax shift invariance), so without a floor they
# would compare two round-off-sized numbers. 1e-5 keeps that noise 20x
# under a 1e-4 tolerance while typical gradients here are 1e-3 to 1.
REL_ERROR_FLOOR = 1e-5


def relative_error(analytic, numeric, floor: float = REL_ERROR_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(f, arr: np.ndarray, index, h: float = 1e-5) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h, restoring ``arr`` afterwards."""
    old = arr[index]
    arr[index] = old + h
    plus = f()
    arr[index] = old - h
    minus = f()
    arr[index] = old
    return (plus - minus) / (2 * h)


@dataclass
class ParamCheck:
    name: str
    n_checked: int
    max_rel_error: float
    max_abs_error: float


@dataclass
class GradcheckReport:
    checks: list[ParamCheck] = field(default_factory=list)
    elapsed: float = 0.0
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self, k: int = 5) -> list[ParamCheck]:
        return sorted(self.checks, key=lambda c: -c.max_rel_error)[:k]

    def to_text(self) -> str:
        lines = [f"{c.name}\tchecked={c.n_checked}\tmax_rel={c.max_rel_error:.3e}\tmax_abs={c.max_abs_error:.3e}"
                 for c in self.checks]
        lines.append(f"max_relative_error={self.max_rel_error:.3e}")
        lines.append(f"tolerance={self.tolerance:g}")
        lines.append(f"elapsed_seconds={self.elapsed:.2f}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines) + "\n"


def gradcheck_instance(seed: int = 0, d: int = 16, n_heads: int = 2, n_layers: int = 2, n_tokens: int = 6,
                       aoa_enabled: bool = True, alpha: float = 0.5):
    """A tiny model with well-spread random weights and a two-utterance batch.

    The second utterance is shorter than the first so padding masks are
    exercised.
    """
    rng = np.random.default_rng(seed)
    vocab = LabelVocabulary(["IntA", "IntB", "IntC"], ["x", "y"])
    cfg = ModelConfig(d=d, n_heads=n_heads, n_enc_layers=n_layers, n_dec_layers=n_layers, d_ff=2 * d,
                      vocab_size=12, n_categories=vocab.size, dropout_p=0.0, alpha=alpha,
                      aoa_enabled=aoa_enabled, seed=seed)
    params = init_params(cfg)
    for name, p in params.named():
        noise = rng.normal(0.0, 0.3, p.shape)
        p.data = (1.0 + noise if name.endswith(".g") else noise).astype(p.dtype)
    batch = []
    for n in (n_tokens, max(1, n_tokens - 2)):
        target = random_target(n, vocab, rng, max_intents=2, max_slots=2)
        u = Utterance([f"w{i}" for i in range(n)], bio_from_spans(target.slots, n), list(target.intents),
                      token_ids=[int(t) for t in rng.integers(4, cfg.vocab_size, n)])
        batch.append((u, target))
    return cfg, params, vocab, batch


def run_gradcheck(seed: int = 0, h: float = 1e-5, entries_per_param: int = 4, tolerance: float = 1e-4,
                  **instance) -> GradcheckReport:
    """Compare tape gradients with central differences on sampled entries of every parameter."""
    from .trainer import teacher_forcing_loss

    start = time.perf_counter()
    with T.precision("float64"):
        cfg, params, vocab, batch = gradcheck_instance(seed, **instance)
        params.zero_grad()
        with T.GradientTape():
            loss = teacher_forcing_loss(batch, params, cfg, vocab)
            T.backward(loss)

        def f():
            return float(teacher_forcing_loss(batch, params, cfg, vocab).data)

        rng = np.random.default_rng(seed + 1)
        report = GradcheckReport(tolerance=tolerance)
        for name, p in params.named():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = rng.choice(p.size, size=min(entries_per_param, p.size), replace=False)
            rel, ab = [], []
            for k in flat:
                idx = np.unravel_index(int(k), p.shape)
                num = numeric_gradient(f, p.data, idx, h)
                rel.append(float(relative_error(grad[idx], num)))
                ab.append(abs(float(grad[idx]) - num))
            report.checks.append(ParamCheck(name, len(flat), max(rel), max(ab)))
    report.elapsed = time.perf_counter() - start
    return report

import numpy as np

from aoaslu.grammar import LabelLayout, LabelVocabulary
from aoaslu.model import ModelConfig, init_params

VOCAB = LabelVocabulary(["IntA", "IntB", "IntC"], ["x", "y", "z"])


def random_config(rng, **overrides):
    heads = int(rng.choice([1, 2, 4]))
    values = dict(d=heads * int(rng.choice([2, 4, 6])), n_heads=heads, n_enc_layers=int(rng.integers(1, 3)),
                  n_dec_layers=int(rng.integers(1, 3)), d_ff=int(rng.choice([8, 16])), vocab_size=15,
                  n_categories=VOCAB.size, dropout_p=0.0, alpha=float(rng.random()), max_len=40,
                  seed=int(rng.integers(1 << 30)))
    values.update(overrides)
    return ModelConfig(**values)


def random_params(cfg, rng, scale=0.3):
    """Weights spread wide enough that every sublayer matters."""
    params = init_params(cfg)
    for name, p in params.named():
        noise = rng.normal(0.0, scale, p.shape)
        p.data = (1.0 + noise if name.endswith(".g") else noise).astype(p.dtype)
    return params


def random_batch(rng, cfg, n_max=8, size=None):
    size = size or int(rng.integers(1, 4))
    return [[int(t) for t in rng.integers(4, cfg.vocab_size, int(rng.integers(1, n_max + 1)))]
            for _ in range(size)]


def random_prefix(rng, n_tokens, steps, vocab=VOCAB):
    """Random decoder inputs in the utterance's own layout; -1 (SOS) first."""
    lay = LabelLayout.for_tokens(n_tokens, vocab)
    labels = [-1]
    for _ in range(steps - 1):
        labels.append(int(rng.integers(0, lay.eos_id)))
    return labels

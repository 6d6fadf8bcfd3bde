"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--rows 4096] [--width 64] [--repeat 20]

Times each row kernel on a (rows, width) array, then one full training
step of a small model, for every available backend.
"""

import argparse
import timeit

import numpy as np

from aoaslu import kernels
from aoaslu import tensor as T
from aoaslu.grammar import LabelVocabulary
from aoaslu.model import ModelConfig, init_params
from aoaslu.synthetic import single_intent_corpus
from aoaslu.corpus import Tokenizer
from aoaslu.trainer import prepare, teacher_forcing_loss


def kernel_cases(rows, width, dtype, rng):
    x = rng.normal(size=(rows, width)).astype(dtype)
    gy = rng.normal(size=(rows, width)).astype(dtype)
    mask = rng.random((rows, width)) < 0.9
    mask[:, 0] = True
    gamma = np.ones(width, dtype)
    beta = np.zeros(width, dtype)
    y = kernels.softmax_forward(x, mask)
    _, xhat, rstd = kernels.layer_norm_forward(x, gamma, beta, 1e-5)
    return {
        "softmax_forward": lambda: kernels.softmax_forward(x, mask),
        "softmax_backward": lambda: kernels.softmax_backward(y, gy),
        "layer_norm_forward": lambda: kernels.layer_norm_forward(x, gamma, beta, 1e-5),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(gy, xhat, rstd, gamma),
        "gelu_forward": lambda: kernels.gelu_forward(x),
        "gelu_backward": lambda: kernels.gelu_backward(x, gy),
    }


def training_step_case(batch_size, seed):
    rng = np.random.default_rng(seed)
    corpus = single_intent_corpus(batch_size, rng)
    tok = Tokenizer.build(corpus)
    vocab = LabelVocabulary.from_corpus(corpus)
    prepare(corpus, tok)
    cfg = ModelConfig(d=64, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=256, vocab_size=len(tok),
                      n_categories=vocab.size, dropout_p=0.0)
    params = init_params(cfg)
    batch = [(u, u.target()) for u in corpus]

    def step():
        params.zero_grad()
        with T.GradientTape():
            T.backward(teacher_forcing_loss(batch, params, cfg, vocab))

    return step


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=4096)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--batch", type=int, default=16, help="utterances per training step")
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = p.parse_args(argv)

    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.rows, args.width, np.dtype(args.dtype), rng)
    cases["training_step"] = training_step_case(args.batch, seed=0)

    results = {}
    for name in backends:
        with kernels.use_backend(name):
            for case, fn in cases.items():
                number = 1 if case == "training_step" else 10
                results[case, name] = best_of(fn, args.repeat if number > 1 else 5, number)

    print(f"rows={args.rows} width={args.width} dtype={args.dtype} backends={','.join(backends)}")
    header = f"{'kernel':<22}" + "".join(f"{b + ' (ms)':>16}" for b in backends)
    if "cython" in backends and "python" in backends:
        header += f"{'speedup':>10}"
    print(header)
    for case in cases:
        line = f"{case:<22}" + "".join(f"{results[case, b] * 1e3:>16.3f}" for b in backends)
        if "cython" in backends and "python" in backends:
            line += f"{results[case, 'python'] / results[case, 'cython']:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()

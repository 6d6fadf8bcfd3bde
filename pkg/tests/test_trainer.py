import math

import numpy as np
import pytest

from aoaslu import tensor as T
from aoaslu import trainer
from aoaslu.corpus import Tokenizer
from aoaslu.errors import CheckpointError, ConfigError, NumericFault
from aoaslu.grammar import LabelVocabulary, Utterance
from aoaslu.model import ModelConfig, init_params, parameter_shapes
from aoaslu.synthetic import single_intent_corpus
from aoaslu.trainer import (AdamW, Checkpoint, TrainConfig, clip_grad_norm, load_checkpoint, prepare,
                            save_checkpoint, teacher_forcing_loss, train)


def tiny_setup(n=8, seed=0):
    corpus = single_intent_corpus(n, np.random.default_rng(seed))
    tok = Tokenizer.build(corpus)
    vocab = LabelVocabulary.from_corpus(corpus)
    cfg = ModelConfig(d=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=32, vocab_size=len(tok),
                      n_categories=vocab.size, dropout_p=0.0)
    return prepare(corpus, tok), tok, vocab, cfg


def test_uniform_logits_give_log_20(f64):
    intents = [f"I{i}" for i in range(13)]
    vocab = LabelVocabulary(intents, [])
    cfg = ModelConfig(d=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=8, vocab_size=10,
                      n_categories=vocab.size, dropout_p=0.0)
    params = init_params(cfg)
    for _, p in params.named():
        p.data[...] = 0.0
    u = Utterance(["a"] * 5, ["O"] * 5, ["I3", "I7"], token_ids=[4] * 5)
    loss = teacher_forcing_loss([(u, u.target())], params, cfg, vocab)
    # 6 pointer positions + 13 categories + EOS = 20 outcomes
    assert float(loss.data) == pytest.approx(math.log(20), abs=1e-12)


def test_padding_does_not_change_a_sample_loss(f64):
    corpus, tok, vocab, cfg = tiny_setup()
    params = init_params(cfg, seed=3)
    short = min(corpus, key=len)
    long = max(corpus, key=len)
    alone = float(teacher_forcing_loss([(short, short.target())], params, cfg, vocab).data)
    other = float(teacher_forcing_loss([(long, long.target())], params, cfg, vocab).data)
    both = float(teacher_forcing_loss([(short, short.target()), (long, long.target())], params, cfg, vocab).data)
    assert both == pytest.approx((alone + other) / 2, abs=1e-12)


def test_non_finite_loss_raises_with_diagnostics():
    corpus, tok, vocab, cfg = tiny_setup()
    params = init_params(cfg)
    params["category_weights"].data[...] = np.nan
    with pytest.raises(NumericFault) as exc:
        teacher_forcing_loss([(corpus[0], corpus[0].target())], params, cfg, vocab)
    assert "param_norms" in exc.value.diagnostics


def test_adamw_decays_matrices_only():
    cfg = ModelConfig(d=4, n_heads=1, n_enc_layers=1, n_dec_layers=1, d_ff=4, vocab_size=6)
    params = init_params(cfg)
    for _, p in params.named():
        p.data[...] = 1.0
        p.grad = np.zeros_like(p.data)
    opt = AdamW(params, lr=0.1, weight_decay=0.5)
    opt.step()
    assert params["pointer.w"].data[0, 0] == pytest.approx(1.0 - 0.1 * 0.5)
    assert params["pointer.b"].data[0] == 1.0


def test_clip_grad_norm():
    cfg = ModelConfig(d=4, n_heads=1, n_enc_layers=1, n_dec_layers=1, d_ff=4, vocab_size=6)
    params = init_params(cfg)
    for _, p in params.named():
        p.grad = np.full(p.shape, 3.0, dtype=p.dtype)
    total = clip_grad_norm(params, 1.0)
    assert total > 1.0
    after = math.sqrt(sum(float((p.grad.astype(float) ** 2).sum()) for p in params))
    assert after == pytest.approx(1.0, rel=1e-5)


def test_training_is_deterministic():
    corpus, tok, vocab, cfg = tiny_setup()
    tc = TrainConfig(epochs=3, learning_rates=(1e-3,), batch_size=4)
    a = train(corpus, corpus, cfg, tc, tok, vocab)
    b = train(corpus, corpus, cfg, tc, tok, vocab)
    assert [r.loss for r in a.curves] == [r.loss for r in b.curves]
    for k, v in a.best.params.items():
        np.testing.assert_array_equal(v, b.best.params[k])


def test_selection_over_learning_rate_grid(tmp_path):
    corpus, tok, vocab, cfg = tiny_setup()
    tc = TrainConfig(epochs=2, learning_rates=(3e-3, 1e-3), batch_size=4, checkpoint_dir=str(tmp_path))
    out = train(corpus, corpus, cfg, tc, tok, vocab)
    assert {r.learning_rate for r in out.curves} == {1e-3, 3e-3}
    best_key = min((-r.dev_overall, r.epoch, r.learning_rate) for r in out.curves)
    assert (out.best.epoch, out.best.learning_rate) == (best_key[1], best_key[2])
    assert (tmp_path / "model.gslu").exists()


def test_recorded_metric_matches_reload(tmp_path):
    corpus, tok, vocab, cfg = tiny_setup()
    out = train(corpus, corpus, cfg, TrainConfig(epochs=4, learning_rates=(3e-3,), batch_size=4), tok, vocab)
    save_checkpoint(out.best, tmp_path / "m.gslu")
    ck = load_checkpoint(tmp_path / "m.gslu")
    report = trainer.evaluate_params(prepare(corpus, ck.tokenizer), ck.model_params(), ck.model_config,
                                     ck.labels, ck.max_steps)
    assert report.overall_accuracy == out.best.metrics["overall_accuracy"]
    assert ck.metrics["overall_accuracy"] == out.best.metrics["overall_accuracy"]


def test_divergence_aborts_grid_point(monkeypatch):
    corpus, tok, vocab, cfg = tiny_setup()
    calls = {"n": 0}

    def exploding(batch, params, cfg_, vocab_, rng=None):
        calls["n"] += 1
        w = params["eos_weights"]
        return T.add(T.scale(T.sum(w), 0.0), T.Tensor(np.array(10.0 ** min(calls["n"], 30), dtype=w.dtype)))

    monkeypatch.setattr(trainer, "teacher_forcing_loss", exploding)
    out = train(corpus, corpus, cfg, TrainConfig(epochs=20, learning_rates=(1e-3,), batch_size=8), tok, vocab)
    assert out.aborted == [1e-3]
    assert len(out.curves) < 20


def make_checkpoint():
    corpus, tok, vocab, cfg = tiny_setup()
    params = init_params(cfg, tok, vocab.categories, seed=5)
    return Checkpoint(params.arrays(), cfg, vocab, tok, epoch=3, learning_rate=1e-3,
                      metrics={"overall_accuracy": 0.5, "n_utterances": 8}, max_steps=20)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    ck = make_checkpoint()
    path = tmp_path / "m.gslu"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    for k, v in ck.params.items():
        assert back.params[k].tobytes() == v.astype("<f4").tobytes()
    assert back.model_config == ck.model_config
    assert back.labels == ck.labels and back.tokenizer == ck.tokenizer
    assert (back.epoch, back.learning_rate, back.max_steps) == (3, 1e-3, 20)
    save_checkpoint(back, tmp_path / "again.gslu")
    for suffix in ("", ".cfg", ".vocab"):
        assert (tmp_path / ("m.gslu" + suffix)).read_bytes() == (tmp_path / ("again.gslu" + suffix)).read_bytes()


def test_truncated_checkpoint_raises(tmp_path):
    ck = make_checkpoint()
    path = tmp_path / "m.gslu"
    save_checkpoint(ck, path)
    raw = path.read_bytes()
    for cut in (3, 40, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_manifest_count_matches_config(tmp_path):
    ck = make_checkpoint()
    path = tmp_path / "m.gslu"
    save_checkpoint(ck, path)
    count = int.from_bytes(path.read_bytes()[8:12], "little")
    cfg = ck.model_config
    assert count == len(parameter_shapes(cfg)) == 6 + 16 * cfg.n_enc_layers + 28 * cfg.n_dec_layers


def test_config_mismatch_rejected(tmp_path):
    ck = make_checkpoint()
    path = tmp_path / "m.gslu"
    save_checkpoint(ck, path)
    side = (tmp_path / "m.gslu.cfg").read_text().replace("model.d_ff=32", "model.d_ff=64")
    (tmp_path / "m.gslu.cfg").write_text(side)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rates=())
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)

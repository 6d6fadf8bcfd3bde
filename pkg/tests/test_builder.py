import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from aoaslu import builder as B
from aoaslu.errors import BuilderError, ScorerError
from aoaslu.grammar import Span, Utterance, spans_from_bio
from aoaslu.synthetic import clustered_affinity, single_intent_corpus


def utt(text, tags, intent):
    return Utterance(text.split(), tags.split(), [intent])


U1 = utt("play got the time", "O B-track I-track I-track", "PlayMusic")
U2 = utt("add my hands to travelling playlist", "O B-entity I-entity O B-playlist O", "AddToPlaylist")


def test_concat_shifts_spans():
    merged = B.concat_samples(U1, U2, "and then")
    assert merged.tokens[4:6] == ["and", "then"] and merged.bio_tags[4:6] == ["O", "O"]
    shift = len(U1.tokens) + 2
    assert merged.spans == U1.spans + [Span(s.start + shift, s.end + shift, s.label) for s in U2.spans]
    assert spans_from_bio(merged.bio_tags) == merged.spans
    assert merged.intents == ["PlayMusic", "AddToPlaylist"]


def test_empty_conjunction_is_pure_concatenation():
    merged = B.concat_samples(U1, U2, "")
    assert merged.tokens == U1.tokens + U2.tokens
    assert merged.spans[1].start == U2.spans[0].start + len(U1.tokens)


def test_concat_rejects_shared_intent():
    with pytest.raises(BuilderError):
        B.concat_samples(U1, U1)


def test_heuristic_scores():
    a = utt("w1 w2 w3 w4 w5", "O O O O O", "A")
    b = utt("w1 x2 x3 x4 x5", "O O O O O", "B")
    c = utt("w1 w2 y3", "O O O", "B")
    d = utt("w1 w2 z3 z4 z5 z6 z7 z8 z9", "O O O O O O O O O", "A")
    s = B.HeuristicScorer({("A", "B"): 0.8}, stopwords=())
    # 2 shared content words out of 10 distinct
    assert s.score(c, d) == pytest.approx(0.5 * 0.8 + 0.5 * 0.2)
    zero = B.HeuristicScorer({("A", "B"): 0.0}, stopwords=())
    assert zero.score(utt("p q", "O O", "A"), utt("r s", "O O", "B")) == 0.0
    one = B.HeuristicScorer({("A", "B"): 1.0}, stopwords=())
    assert one.score(utt("p q", "O O", "A"), utt("q p", "O O", "B")) == 1.0
    assert B.HeuristicScorer({}).score(a, b) == pytest.approx(0.5 * B.DEFAULT_AFFINITY + 0.5 / 9)


def test_tau_zero_realises_every_sample():
    src = single_intent_corpus(10_000, np.random.default_rng(0))
    res = B.build(src, B.BuilderConfig(tau=0.0, seed=3), B.ConstantScorer(0.5))
    counts = np.bincount([len(u.intents) for u in res.corpus], minlength=4)[1:] / len(src)
    assert np.all(np.abs(counts - np.array([0.3, 0.5, 0.2])) < 0.05)
    assert res.shortfalls == 0
    assert len(res.corpus) == len(src)
    assert all(len(set(u.intents)) == len(u.intents) for u in res.corpus)
    for u in res.corpus:
        assert spans_from_bio(u.bio_tags) == u.spans


def test_tau_one_never_accepts():
    src = single_intent_corpus(200, np.random.default_rng(1))
    res = B.build(src, B.BuilderConfig(tau=1.0), B.ConstantScorer(1.0))
    assert all(len(u.intents) == 1 for u in res.corpus)
    assert not any(r.accepted for r in res.audit)


def test_audit_log_consistent(tmp_path):
    src = single_intent_corpus(300, np.random.default_rng(2))
    cfg = B.BuilderConfig(tau=0.3, seed=4)
    res = B.build(src, cfg, B.HeuristicScorer(clustered_affinity()))
    accepted = [r for r in res.audit if r.accepted]
    assert all(r.score > cfg.tau for r in accepted)
    assert all(r.score <= cfg.tau for r in res.audit if not r.accepted)
    extra = sum(len(u.intents) - 1 for u in res.corpus)
    assert len(accepted) == extra
    path = tmp_path / "audit.tsv"
    res.write_audit(path)
    lines = path.read_text().splitlines()
    assert lines[0] == B.AUDIT_HEADER and len(lines) == len(res.audit) + 1


def test_build_is_deterministic_across_workers():
    src = single_intent_corpus(150, np.random.default_rng(5))
    scorer = B.HeuristicScorer(clustered_affinity())
    a = B.build(src, B.BuilderConfig(tau=0.3, seed=9), scorer)
    b = B.build(src, B.BuilderConfig(tau=0.3, seed=9, workers=3), scorer)
    assert [u.tokens for u in a.corpus] == [u.tokens for u in b.corpus]
    c = B.build(src, B.BuilderConfig(tau=0.3, seed=10), scorer)
    assert [u.tokens for u in a.corpus] != [u.tokens for u in c.corpus]


def test_exhausted_candidates_decrement():
    src = [utt("a", "O", "A"), utt("b", "O", "A"), utt("c", "O", "B")]
    cfg = B.BuilderConfig(tau=0.0, intent_count_probs=(0.0, 0.0, 1.0), seed=0)
    res = B.build(src, cfg, B.ConstantScorer(0.5))
    assert all(len(u.intents) == 2 for u in res.corpus)
    assert res.shortfalls == 3


class FlakyScorer:
    def __init__(self):
        self.calls = 0

    def score(self, a, b):
        self.calls += 1
        if self.calls % 3:
            raise ScorerError("boom")
        return 0.9


def test_scorer_failures_are_skipped():
    src = single_intent_corpus(40, np.random.default_rng(6))
    res = B.build(src, B.BuilderConfig(tau=0.5, seed=1), FlakyScorer())
    assert len(res.corpus) == 40
    assert all(r.score == 0.9 for r in res.audit)


def test_source_validation():
    with pytest.raises(BuilderError):
        B.build([], B.BuilderConfig(), B.ConstantScorer())
    with pytest.raises(BuilderError):
        B.build([utt("a", "O", "A"), utt("b", "O", "A")], B.BuilderConfig(), B.ConstantScorer())
    two = Utterance(["a"], ["O"], ["A", "B"])
    with pytest.raises(BuilderError):
        B.build([two, utt("b", "O", "C")], B.BuilderConfig(), B.ConstantScorer())
    with pytest.raises(BuilderError):
        B.BuilderConfig(intent_count_probs=(0.5, 0.6))
    with pytest.raises(BuilderError):
        B.BuilderConfig(conjunctions=())


def test_dedup_option():
    src = [utt("a", "O", "A"), utt("a", "O", "A"), utt("b", "O", "B")]
    cfg = B.BuilderConfig(tau=1.0, dedup=True)
    assert len(B.build(src, cfg, B.ConstantScorer()).corpus) == 2


def test_split_sources_before_building():
    src = single_intent_corpus(100, np.random.default_rng(7))
    for i, u in enumerate(src):
        u.tokens[0] = f"id{i}"
    parts = B.split_then_build(src, (0.8, 0.2), B.BuilderConfig(tau=0.0), B.ConstantScorer())
    ids = [{t for u in part.corpus for t in u.tokens if t.startswith("id")} for part in parts]
    assert not ids[0] & ids[1]
    assert [len(p.corpus) for p in parts] == [80, 20]


def test_affinity_file_round_trip(tmp_path):
    table = clustered_affinity()
    path = tmp_path / "aff.tsv"
    B.write_affinity(table, path)
    assert B.read_affinity(path) == table
    path.write_text("A\tB\n")
    with pytest.raises(BuilderError):
        B.read_affinity(path)


def test_cooccurrence_matrix():
    single = [utt("a", "O", "A"), utt("b", "O", "B")]
    assert not B.cooccurrence_matrix(single).counts.any()
    r = B.cooccurrence_matrix([Utterance(["a"], ["O"], ["A", "B", "C"])])
    assert r.counts.tolist() == [[0, 1, 1], [1, 0, 1], [1, 1, 0]]
    assert "intent\tchi2\tp_value" in r.to_text()


class MockNSP(BaseHTTPRequestHandler):
    score = 0.9
    requests = 0
    fail_first = 0

    def do_POST(self):
        cls = type(self)
        cls.requests += 1
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        assert set(body) == {"sentence_a", "sentence_b"}
        if cls.fail_first:
            cls.fail_first -= 1
            self.send_response(500)
            self.end_headers()
            return
        payload = json.dumps({"score": cls.score}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    MockNSP.score, MockNSP.requests, MockNSP.fail_first = 0.9, 0, 0
    srv = ThreadingHTTPServer(("127.0.0.1", 0), MockNSP)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}/score"
    srv.shutdown()
    srv.server_close()


def test_remote_scorer_pass_through_and_cache(server):
    scorer = B.RemoteScorer(server, backoff=0.0)
    assert scorer.score(U1, U2) == 0.9
    assert scorer.score(U1, U2) == 0.9
    assert MockNSP.requests == 1
    scorer.score(U2, U1)
    assert MockNSP.requests == 2


def test_remote_scorer_rejects_out_of_range(server):
    MockNSP.score = 1.7
    with pytest.raises(ScorerError):
        B.RemoteScorer(server, backoff=0.0).score(U1, U2)


def test_remote_scorer_retries(server):
    MockNSP.fail_first = 2
    assert B.RemoteScorer(server, retries=3, backoff=0.0).score(U1, U2) == 0.9
    assert MockNSP.requests == 3
    MockNSP.fail_first = 10
    with pytest.raises(ScorerError):
        B.RemoteScorer(server, retries=1, backoff=0.0).score(U2, U1)


def test_remote_scorer_unreachable():
    scorer = B.RemoteScorer("http://127.0.0.1:9/none", timeout=0.5, retries=1, backoff=0.0)
    with pytest.raises(ScorerError):
        scorer.score(U1, U2)

"""Teacher-forced training, model selection and checkpoints.

Checkpoint container (little-endian)::

    b"GSLU" | u32 version | u32 n_tensors
    per tensor: u16 name_len | name utf-8 | u8 ndim | u32 dims[ndim] | u64 offset
    data: float32 values, offsets relative to the start of this section

A ``<path>.cfg`` sidecar holds ``key=value`` lines (model config, labels,
training record) and ``<path>.vocab`` the tokenizer.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .corpus import Tokenizer
from .decoding import max_steps_for, predict_batch
from .errors import CheckpointError, ConfigError, NumericFault
from .grammar import LabelLayout, LabelVocabulary, TargetSequence, Utterance, target_ids
from .metrics import EvalReport, evaluate
from .model import (ModelConfig, ModelParams, decode_hidden, encode_batch, init_params,
                    parameter_shapes, pointer_logits, position_mask)

log = logging.getLogger(__name__)

MAGIC = b"GSLU"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30
    learning_rates: tuple = (1e-4, 3e-4, 1e-3)
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1
    checkpoint_dir: str | None = None
    stop_at_perfect: bool = False

    def __post_init__(self):
        self.learning_rates = tuple(float(x) for x in self.learning_rates)
        if not self.learning_rates:
            raise ConfigError("learning-rate grid is empty")
        for name in ("batch_size", "epochs", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if min(self.learning_rates) <= 0 or self.grad_clip <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and grad_clip must be positive, weight_decay >= 0")


def teacher_forcing_loss(batch: Sequence[tuple[Utterance, TargetSequence]], params: ModelParams,
                         cfg: ModelConfig, vocab: LabelVocabulary, rng=None) -> T.Tensor:
    """Mean over the batch of each sample's per-step cross-entropy.

    Decoder inputs are the gold labels shifted right behind SOS. Position
    logits beyond a sample's own length are masked out.
    """
    if not batch:
        raise ValueError("empty batch")
    enc = encode_batch([u.token_ids for u, _ in batch], params, cfg, rng)
    B = len(batch)
    batch_layout = LabelLayout(enc.n_positions, vocab.size)
    seqs = []
    for u, target in batch:
        own = LabelLayout.for_tokens(len(u.tokens), vocab)
        seqs.append([own.convert(i, batch_layout) for i in target_ids(target, len(u.tokens), vocab)])
    steps = max(len(s) for s in seqs)
    inputs = np.full((B, steps), -1, dtype=np.intp)
    targets = np.zeros((B, steps), dtype=np.intp)
    weights = np.zeros((B, steps))
    for b, s in enumerate(seqs):
        inputs[b, 1:len(s)] = s[:-1]
        targets[b, :len(s)] = s
        weights[b, :len(s)] = 1.0 / (len(s) * B)
    h = decode_hidden(inputs, enc, params, cfg, rng=rng)
    logits = pointer_logits(h, enc, params, cfg)
    C = logits.shape[-1]
    mask = np.broadcast_to(position_mask(enc, vocab.size)[:, None, :], (B, steps, C)).reshape(-1, C)
    loss = T.cross_entropy(T.reshape(logits, (B * steps, C)), targets.ravel(), weights.ravel(), mask)
    if not np.isfinite(loss.data):
        raise NumericFault("non-finite training loss", {
            "loss": float(loss.data),
            "param_norms": {k: float(np.linalg.norm(t.data)) for k, t in params.named()},
            "logit_range": (float(np.nanmin(logits.data)), float(np.nanmax(logits.data))),
        })
    return loss


class AdamW:
    """Adam with decoupled weight decay (applied to 2-D weights only)."""

    def __init__(self, params: ModelParams, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.named()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.named()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.named():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.dtype)


def clip_grad_norm(params: ModelParams, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return total


@dataclass
class Checkpoint:
    params: dict
    model_config: ModelConfig
    labels: LabelVocabulary
    tokenizer: Tokenizer
    epoch: int = 0
    learning_rate: float = 0.0
    metrics: dict = field(default_factory=dict)
    max_steps: int = 64
    version: int = FORMAT_VERSION

    def model_params(self) -> ModelParams:
        params = init_params(self.model_config)
        params.load_arrays(self.params)
        return params


@dataclass
class EpochRecord:
    learning_rate: float
    epoch: int
    loss: float
    dev_overall: float | None = None
    dev_intent: float | None = None
    dev_slot_f1: float | None = None


@dataclass
class TrainOutcome:
    best: Checkpoint
    curves: list[EpochRecord]
    aborted: list[float] = field(default_factory=list)


def prepare(corpus: Sequence[Utterance], tokenizer: Tokenizer) -> list[Utterance]:
    for u in corpus:
        u.token_ids = tokenizer.encode(u.tokens)
    return list(corpus)


def evaluate_params(corpus, params, cfg, vocab, max_steps) -> EvalReport:
    preds = predict_batch(corpus, params, cfg, vocab, max_steps)
    return evaluate([u.target() for u, _ in preds], [p.scored() for _, p in preds])


def train(train_corpus: Sequence[Utterance], dev_corpus: Sequence[Utterance], model_cfg: ModelConfig,
          train_cfg: TrainConfig, tokenizer: Tokenizer, vocab: LabelVocabulary,
          log_line: Callable[[str], None] | None = None) -> TrainOutcome:
    """Grid over learning rates; keep the checkpoint with best dev overall accuracy.

    Ties go to the earlier epoch, then the lower learning rate. A grid point
    is abandoned when its epoch loss exceeds 10x the first epoch's loss at
    three consecutive evaluations.
    """
    if not train_corpus or not dev_corpus:
        raise ValueError("training and dev corpora must be non-empty")
    train_corpus = prepare(train_corpus, tokenizer)
    dev_corpus = prepare(dev_corpus, tokenizer)
    max_steps = max_steps_for(list(train_corpus) + list(dev_corpus))
    pairs = [(u, u.target()) for u in train_corpus]
    curves: list[EpochRecord] = []
    aborted = []
    best_key, best = None, None

    for lr in sorted(train_cfg.learning_rates):
        params = init_params(model_cfg, tokenizer, vocab.categories)
        opt = AdamW(params, lr, (train_cfg.beta1, train_cfg.beta2), train_cfg.adam_eps, train_cfg.weight_decay)
        rng = np.random.default_rng(train_cfg.seed)
        dropout_rng = rng if model_cfg.dropout_p > 0 else None
        first_loss, strikes, step = None, 0, 0
        for epoch in range(1, train_cfg.epochs + 1):
            order = rng.permutation(len(pairs))
            losses = []
            for i in range(0, len(order), train_cfg.batch_size):
                batch = [pairs[j] for j in order[i:i + train_cfg.batch_size]]
                params.zero_grad()
                with T.GradientTape():
                    loss = teacher_forcing_loss(batch, params, model_cfg, vocab, dropout_rng)
                    T.backward(loss)
                clip_grad_norm(params, train_cfg.grad_clip)
                opt.step()
                step += 1
                losses.append(float(loss.data))
                if log_line:
                    log_line(f"{epoch}\t{step}\t{losses[-1]:.6f}\t{lr:g}")
            epoch_loss = float(np.mean(losses))
            if first_loss is None:
                first_loss = epoch_loss
            record = EpochRecord(lr, epoch, epoch_loss)
            curves.append(record)
            if epoch % train_cfg.eval_every and epoch != train_cfg.epochs:
                continue
            report = evaluate_params(dev_corpus, params, model_cfg, vocab, max_steps)
            record.dev_overall = report.overall_accuracy
            record.dev_intent = report.intent_accuracy
            record.dev_slot_f1 = report.slot_f1
            log.info("lr=%g epoch=%d loss=%.4f dev_overall=%.4f", lr, epoch, epoch_loss, report.overall_accuracy)
            key = (-report.overall_accuracy, epoch, lr)
            if best_key is None or key < best_key:
                best_key = key
                best = Checkpoint(params.arrays(), model_cfg, vocab, tokenizer, epoch, lr,
                                  report.to_dict(), max_steps)
            strikes = strikes + 1 if epoch_loss > 10 * first_loss else 0
            if strikes >= 3:
                log.warning("lr=%g diverged at epoch %d; abandoning grid point", lr, epoch)
                aborted.append(lr)
                break
            if train_cfg.stop_at_perfect and report.overall_accuracy >= 1.0:
                break

    if train_cfg.checkpoint_dir:
        out = Path(train_cfg.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(best, out / "model.gslu")
    return TrainOutcome(best, curves, aborted)


def _format_value(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_like(text: str, default):
    if isinstance(default, bool):
        return text in ("1", "true", "True")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    shapes = parameter_shapes(ckpt.model_config)
    if list(shapes) != list(ckpt.params):
        raise CheckpointError("parameter names do not match the model config")
    header = bytearray(MAGIC + struct.pack("<II", ckpt.version, len(shapes)))
    blobs, offset = [], 0
    for name, shape in shapes.items():
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        if arr.shape != shape:
            raise CheckpointError(f"{name}: shape {arr.shape} does not match config {shape}")
        raw = name.encode("utf-8")
        header += struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape))
        header += struct.pack(f"<{len(shape)}I", *shape) + struct.pack("<Q", offset)
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    path.write_bytes(bytes(header) + b"".join(blobs))

    lines = [f"format_version={ckpt.version}"]
    lines += [f"model.{k}={_format_value(v)}" for k, v in asdict(ckpt.model_config).items()]
    lines += [
        f"labels.intents={'#'.join(ckpt.labels.intents)}",
        f"labels.slots={'#'.join(ckpt.labels.slots)}",
        f"train.epoch={ckpt.epoch}",
        f"train.learning_rate={ckpt.learning_rate!r}",
        f"train.max_steps={ckpt.max_steps}",
    ]
    for k, v in sorted(ckpt.metrics.items()):
        if not isinstance(v, dict):
            lines.append(f"dev.{k}={_format_value(v)}")
    Path(str(path) + ".cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")
    ckpt.tokenizer.save(str(path) + ".vocab")


def _read_sidecar(path: Path) -> dict[str, str]:
    try:
        text = Path(str(path) + ".cfg").read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"missing checkpoint config: {exc}") from None
    out = {}
    for line in text.splitlines():
        if line:
            k, sep, v = line.partition("=")
            if not sep:
                raise CheckpointError(f"bad sidecar line {line!r}")
            out[k] = v
    return out


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    side = _read_sidecar(path)
    model_values = {}
    for f in fields(ModelConfig):
        key = f"model.{f.name}"
        if key not in side:
            raise CheckpointError(f"sidecar lacks {key}")
        model_values[f.name] = _parse_like(side[key], f.default)
    cfg = ModelConfig(**model_values)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(str(exc)) from None
    try:
        if raw[:4] != MAGIC:
            raise CheckpointError("bad magic bytes")
        version, count = struct.unpack_from("<II", raw, 4)
        if version != FORMAT_VERSION or str(version) != side.get("format_version"):
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        manifest = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            (offset,) = struct.unpack_from("<Q", raw, pos + 1 + 4 * ndim)
            pos += 1 + 4 * ndim + 8
            manifest.append((name, tuple(shape), offset))
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint header: {exc}") from None
    expected = parameter_shapes(cfg)
    if [(m[0], m[1]) for m in manifest] != list(expected.items()):
        raise CheckpointError("checkpoint manifest does not match the model config")
    arrays = {}
    for name, shape, offset in manifest:
        n = int(np.prod(shape))
        start = pos + offset
        if start + 4 * n > len(raw):
            raise CheckpointError(f"truncated data for {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(shape).astype(np.float32)
    intents = [x for x in side.get("labels.intents", "").split("#") if x]
    slots = [x for x in side.get("labels.slots", "").split("#") if x]
    metrics = {k[4:]: _number(v) for k, v in side.items() if k.startswith("dev.")}
    try:
        tokenizer = Tokenizer.load(str(path) + ".vocab")
    except OSError as exc:
        raise CheckpointError(f"missing tokenizer: {exc}") from None
    return Checkpoint(
        params=arrays, model_config=cfg, labels=LabelVocabulary(intents, slots), tokenizer=tokenizer,
        epoch=int(side.get("train.epoch", 0)), learning_rate=float(side.get("train.learning_rate", 0.0)),
        metrics=metrics, max_steps=int(side.get("train.max_steps", 64)), version=version,
    )

"""Transformer encoder-decoder over the convolutional front-ends, plus training.

Layers are pre-norm (layer norm before each sub-block, residual around it),
with a final layer norm on both stacks. The decoder shares its token embedding
with the output projection.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats
from torch import nn

from .decode_score import Hypothesis, align_and_score, beam_search, greedy_search
from .errors import NonFiniteLoss, ShapeMismatch
from .frontend import FrontEndConfig, build_frontend, frontend_parameters
from .tensor_core import (DTYPE, Linear, MultiheadAttention, OptimizerState, adam_step,
                          label_smoothed_ce, layer_norm, load_checkpoint, save_checkpoint,
                          sinusoidal_pe)

log = logging.getLogger(__name__)


class Vocab:
    """Character inventory: pad/bos/eos, space, apostrophe and a-z."""

    specials = ("<pad>", "<s>", "</s>")

    def __init__(self, symbols: str = " 'abcdefghijklmnopqrstuvwxyz"):
        self.itos = list(self.specials) + list(symbols)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.pad, self.bos, self.eos = 0, 1, 2

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        text = " ".join(text.lower().split())
        return [self.stoi[c] for c in text if c in self.stoi and c not in self.specials]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos:
                break
            if i >= len(self.specials):
                out.append(self.itos[i])
        return "".join(out).strip()


@dataclass(frozen=True)
class TransformerConfig:
    embed_dim: int = 256
    encoder_layers: int = 3
    decoder_layers: int = 3
    heads: int = 4
    ffn_dim: int = 1024
    dropout: float = 0.1
    vocab_size: int = 31
    share_embeddings: bool = True


@dataclass(frozen=True)
class ModelConfig:
    frontend: FrontEndConfig | None = field(default_factory=FrontEndConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)

    def __post_init__(self):
        t = self.transformer
        if t.embed_dim % t.heads:
            raise ShapeMismatch(f"embed_dim {t.embed_dim} not divisible by {t.heads} heads")
        if self.frontend is not None and self.frontend.O != t.embed_dim:
            raise ShapeMismatch(f"front-end output {self.frontend.O} != embed_dim {t.embed_dim}")


def paper_scale_config(variant: str = "plain", M: int = 5) -> ModelConfig:
    """Full-size configuration: 12 encoder / 6 decoder layers, ffn 2048, 10k vocabulary."""
    return ModelConfig(FrontEndConfig(variant=variant, N=40, M=M),
                       TransformerConfig(encoder_layers=12, decoder_layers=6, ffn_dim=2048,
                                         vocab_size=10000))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)
        self.dropout = dropout

    def forward(self, x):
        x = F.dropout(torch.relu(self.fc1(x)), self.dropout, self.training)
        return self.fc2(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.self_attn = MultiheadAttention(cfg.embed_dim, cfg.heads, cfg.dropout)
        self.self_attn_norm = layer_norm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_dim, cfg.dropout)
        self.ffn_norm = layer_norm(cfg.embed_dim)
        self.dropout = cfg.dropout

    def forward(self, x, padding_mask):
        h = self.self_attn_norm(x)
        x = x + F.dropout(self.self_attn(h, h, h, key_padding_mask=padding_mask),
                          self.dropout, self.training)
        return x + F.dropout(self.ffn(self.ffn_norm(x)), self.dropout, self.training)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.self_attn = MultiheadAttention(cfg.embed_dim, cfg.heads, cfg.dropout)
        self.self_attn_norm = layer_norm(cfg.embed_dim)
        self.cross_attn = MultiheadAttention(cfg.embed_dim, cfg.heads, cfg.dropout)
        self.cross_attn_norm = layer_norm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_dim, cfg.dropout)
        self.ffn_norm = layer_norm(cfg.embed_dim)
        self.dropout = cfg.dropout

    def forward(self, y, memory, memory_mask):
        h = self.self_attn_norm(y)
        y = y + F.dropout(self.self_attn(h, h, h, causal=True), self.dropout, self.training)
        h = self.cross_attn_norm(y)
        y = y + F.dropout(self.cross_attn(h, memory, memory, key_padding_mask=memory_mask),
                          self.dropout, self.training)
        return y + F.dropout(self.ffn(self.ffn_norm(y)), self.dropout, self.training)


class Speech2Text(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        t = cfg.transformer
        self.frontend = build_frontend(cfg.frontend)
        self.encoder_layers = nn.ModuleList(EncoderLayer(t) for _ in range(t.encoder_layers))
        self.encoder_norm = layer_norm(t.embed_dim)
        self.embed_tokens = nn.Embedding(t.vocab_size, t.embed_dim, padding_idx=0, dtype=DTYPE)
        nn.init.normal_(self.embed_tokens.weight, 0.0, t.embed_dim ** -0.5)
        with torch.no_grad():
            self.embed_tokens.weight[0].zero_()
        self.decoder_layers = nn.ModuleList(DecoderLayer(t) for _ in range(t.decoder_layers))
        self.decoder_norm = layer_norm(t.embed_dim)
        self.output_projection = None if t.share_embeddings else Linear(t.embed_dim, t.vocab_size,
                                                                        bias=False)
        self.embed_scale = math.sqrt(t.embed_dim)

    def encode(self, features: torch.Tensor, lengths: torch.Tensor):
        """Returns ``(memory, padding_mask)`` with mask True at padded steps."""
        fe = self.cfg.frontend
        if features.shape[-1] != fe.in_channels:
            raise ShapeMismatch(f"model expects {fe.in_channels} feature channels, "
                                f"got {features.shape[-1]}")
        if fe.variant == "vq":
            out = self.frontend(features[..., :fe.N], features[..., fe.N:], lengths)
        else:
            out = self.frontend(features, lengths)
        x, out_len = out.features, out.lengths
        x = self.embed_scale * x + sinusoidal_pe(x.shape[1], x.shape[2])
        x = F.dropout(x, self.cfg.transformer.dropout, self.training)
        mask = torch.arange(x.shape[1])[None, :] >= out_len[:, None]
        for layer in self.encoder_layers:
            x = layer(x, mask)
        return self.encoder_norm(x), mask

    def decode(self, prev_tokens: torch.Tensor, memory: torch.Tensor, memory_mask: torch.Tensor):
        y = self.embed_scale * self.embed_tokens(prev_tokens)
        y = y + sinusoidal_pe(y.shape[1], y.shape[2])
        y = F.dropout(y, self.cfg.transformer.dropout, self.training)
        for layer in self.decoder_layers:
            y = layer(y, memory, memory_mask)
        y = self.decoder_norm(y)
        if self.output_projection is None:
            return y @ self.embed_tokens.weight.T
        return self.output_projection(y)

    def forward(self, features, lengths, prev_tokens):
        memory, mask = self.encode(features, lengths)
        return self.decode(prev_tokens, memory, mask)

    def named_tensors(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(self.named_parameters())

    def load_tensors(self, tensors) -> None:
        own = self.named_tensors()
        if list(own) != list(tensors):
            missing = set(own) ^ set(tensors)
            raise ShapeMismatch(f"checkpoint parameters differ: {sorted(missing)[:5]}")
        with torch.no_grad():
            for name, p in own.items():
                value = torch.as_tensor(np.asarray(tensors[name]), dtype=DTYPE)
                if value.shape != p.shape:
                    raise ShapeMismatch(f"{name}: checkpoint {tuple(value.shape)} vs {tuple(p.shape)}")
                p.copy_(value)


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count for front-end plus transformer."""
    t = cfg.transformer
    e, f = t.embed_dim, t.ffn_dim
    attn = 4 * (e * e + e)
    ffn = (e * f + f) + (f * e + e)
    norm = 2 * e
    total = frontend_parameters(cfg.frontend) if cfg.frontend is not None else 0
    if t.encoder_layers:
        total += t.encoder_layers * (attn + ffn + 2 * norm) + norm
    if t.decoder_layers:
        total += t.decoder_layers * (2 * attn + ffn + 3 * norm) + norm
    total += t.vocab_size * e * (1 if t.share_embeddings else 2)
    return total


# ---------------------------------------------------------------------------
# data


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    transcript: str


@dataclass
class Batch:
    ids: list[str]
    features: torch.Tensor
    feature_lengths: torch.Tensor
    prev_tokens: torch.Tensor
    targets: torch.Tensor
    target_lengths: torch.Tensor


def collate(utts: Sequence[Utterance], vocab: Vocab) -> Batch:
    n_feat = max(len(u.features) for u in utts)
    channels = utts[0].features.shape[1]
    feats = np.zeros((len(utts), n_feat, channels))
    tokens = [vocab.encode(u.transcript) for u in utts]
    n_tok = max(len(t) for t in tokens) + 1
    prev = np.full((len(utts), n_tok), vocab.pad, dtype=np.int64)
    tgt = np.full((len(utts), n_tok), vocab.pad, dtype=np.int64)
    for i, (u, tok) in enumerate(zip(utts, tokens)):
        feats[i, :len(u.features)] = u.features
        prev[i, :len(tok) + 1] = [vocab.bos] + tok
        tgt[i, :len(tok) + 1] = tok + [vocab.eos]
    return Batch(
        ids=[u.id for u in utts],
        features=torch.as_tensor(feats, dtype=DTYPE),
        feature_lengths=torch.tensor([len(u.features) for u in utts]),
        prev_tokens=torch.as_tensor(prev),
        targets=torch.as_tensor(tgt),
        target_lengths=torch.tensor([len(t) + 1 for t in tokens]),
    )


def make_batches(utts: Sequence[Utterance], max_frames: int = 4000) -> list[list[int]]:
    """Length-sorted buckets whose padded frame count stays within ``max_frames``."""
    order = sorted(range(len(utts)), key=lambda i: (len(utts[i].features), utts[i].id))
    batches, current = [], []
    for i in order:
        longest = len(utts[i].features)
        if current and longest * (len(current) + 1) > max_frames:
            batches.append(current)
            current = []
        current.append(i)
    if current:
        batches.append(current)
    return batches


# ---------------------------------------------------------------------------
# decoding helpers


def model_step_fn(model: Speech2Text, memory: torch.Tensor, mask: torch.Tensor):
    """Wrap an encoded utterance as a prefixes -> next-token log-prob function."""
    @torch.no_grad()
    def step(prefixes):
        width = max(len(p) for p in prefixes)
        if any(len(p) != width for p in prefixes):
            return np.concatenate([step([p]) for p in prefixes])
        prev = torch.tensor(prefixes, dtype=torch.long)
        logits = model.decode(prev, memory.expand(len(prefixes), -1, -1),
                              mask.expand(len(prefixes), -1))
        return torch.log_softmax(logits[:, -1], dim=-1).numpy()
    return step


@torch.no_grad()
def decode_utterance(model: Speech2Text, features: np.ndarray, vocab: Vocab, beam: int = 5,
                     max_len: int | None = None) -> Hypothesis:
    model.eval()
    x = torch.as_tensor(features, dtype=DTYPE)[None]
    memory, mask = model.encode(x, torch.tensor([len(features)]))
    if max_len is None:
        max_len = 2 + memory.shape[1]
    step = model_step_fn(model, memory, mask)
    if beam == 1:
        return greedy_search(step, vocab.bos, vocab.eos, max_len)
    return beam_search(step, vocab.bos, vocab.eos, beam, max_len)


def transcribe(model, utts: Sequence[Utterance], vocab: Vocab, beam: int = 5) -> list[tuple[str, str]]:
    return [(u.id, vocab.decode(decode_utterance(model, u.features, vocab, beam).tokens))
            for u in utts]


def corpus_wer(utts: Sequence[Utterance], hyps: Sequence[tuple[str, str]]) -> float:
    ref = {u.id: u.transcript for u in utts}
    total = None
    for uid, text in hyps:
        r = align_and_score(ref[uid], text)
        total = r if total is None else total + r
    return total.wer


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    max_updates: int = 3000
    lr_peak: float = 0.002
    warmup: int = 10000
    clip_norm: float = 10.0
    clip_mode: str = "norm"
    smoothing: float = 0.1
    max_frames: int = 4000
    save_interval: int = 500
    eval_interval: int = 0
    stop_train_wer: float | None = None
    min_updates: int = 0


LOG_FIELDS = ["step", "lr", "train_loss", "dev_loss", "dev_wer"]


@dataclass
class TrainResult:
    model: Speech2Text
    history: list[dict]
    checkpoints: list[Path]
    final_step: int
    train_wer: float | None = None


def build_model(cfg: ModelConfig, seed: int) -> Speech2Text:
    torch.manual_seed(seed)
    return Speech2Text(cfg)


def batch_loss(model: Speech2Text, batch: Batch, smoothing: float, pad: int) -> torch.Tensor:
    logits = model(batch.features, batch.feature_lengths, batch.prev_tokens)
    loss, _ = label_smoothed_ce(logits, batch.targets, smoothing, pad)
    return loss


@torch.no_grad()
def evaluate_loss(model, utts, vocab, cfg: TrainConfig) -> float:
    model.eval()
    total, count = 0.0, 0
    for idx in make_batches(utts, cfg.max_frames):
        batch = collate([utts[i] for i in idx], vocab)
        n = int(batch.target_lengths.sum())
        total += float(batch_loss(model, batch, cfg.smoothing, vocab.pad)) * n
        count += n
    return total / count


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step}.bin"


def _optimizer_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(".opt")


def save_training_state(model, state: OptimizerState, out_dir, step: int) -> Path:
    path = checkpoint_path(out_dir, step)
    save_checkpoint(path, model.named_tensors(), step)
    moments = OrderedDict()
    for name in model.named_tensors():
        moments[f"exp_avg.{name}"] = state.exp_avg[name]
        moments[f"exp_avg_sq.{name}"] = state.exp_avg_sq[name]
    save_checkpoint(_optimizer_path(path), moments, step)
    return path


def list_checkpoints(out_dir) -> list[Path]:
    paths = Path(out_dir).glob("ckpt_*.bin")
    return sorted(paths, key=lambda p: int(p.stem.split("_")[1]))


def train(train_utts: Sequence[Utterance], model_cfg: ModelConfig, cfg: TrainConfig,
          seed: int, out_dir, dev_utts: Sequence[Utterance] | None = None,
          resume: bool = False, vocab: Vocab | None = None) -> TrainResult:
    """Train with label-smoothed CE and clipped Adam under a warmup/inverse-sqrt LR.

    Batch order, initialisation and dropout are derived from ``seed``; dropout
    is reseeded every update from ``(seed, step)`` so resumed runs follow the
    same trajectory as uninterrupted ones. Writes ``ckpt_<step>.bin`` every
    ``save_interval`` updates (and at the end) plus ``train_log.csv``.
    """
    if not train_utts:
        raise ValueError("training set is empty")
    vocab = vocab or Vocab()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(model_cfg, seed)
    state = OptimizerState(lr_peak=cfg.lr_peak, warmup_steps=cfg.warmup,
                           clip_norm=cfg.clip_norm, clip_mode=cfg.clip_mode)
    params = model.named_tensors()
    log_path = out_dir / "train_log.csv"
    history: list[dict] = []

    existing = list_checkpoints(out_dir) if resume else []
    if existing:
        latest = existing[-1]
        tensors, step = load_checkpoint(latest)
        model.load_tensors(tensors)
        moments, _ = load_checkpoint(_optimizer_path(latest))
        for name in params:
            state.exp_avg[name] = torch.as_tensor(moments[f"exp_avg.{name}"], dtype=DTYPE)
            state.exp_avg_sq[name] = torch.as_tensor(moments[f"exp_avg_sq.{name}"], dtype=DTYPE)
        state.step = step
        history = [row for row in _read_log(log_path) if int(row["step"]) <= step]
        log.info("resumed from %s at step %d", latest, step)
    else:
        for stale in list_checkpoints(out_dir):
            stale.unlink()
            _optimizer_path(stale).unlink(missing_ok=True)
    _write_log(log_path, history)

    batches = make_batches(train_utts, cfg.max_frames)
    checkpoints = list_checkpoints(out_dir)
    train_wer = None
    while state.step < cfg.max_updates:
        epoch, pos = divmod(state.step, len(batches))
        order = np.random.default_rng([seed, epoch]).permutation(len(batches))
        batch = collate([train_utts[i] for i in batches[order[pos]]], vocab)

        torch.manual_seed(seed * 1_000_003 + state.step)
        model.train()
        loss = batch_loss(model, batch, cfg.smoothing, vocab.pad)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"loss is {loss.item()} at step {state.step + 1}")
        model.zero_grad(set_to_none=True)
        loss.backward()
        info = adam_step(params, {n: p.grad for n, p in params.items()}, state)
        row = {"step": state.step, "lr": info["lr"], "train_loss": loss.item(),
               "dev_loss": "", "dev_wer": ""}

        at_save = state.step % cfg.save_interval == 0 or state.step == cfg.max_updates
        if dev_utts and at_save:
            row["dev_loss"] = evaluate_loss(model, dev_utts, vocab, cfg)
            row["dev_wer"] = corpus_wer(dev_utts, transcribe(model, dev_utts, vocab, beam=1))

        stop = False
        if (cfg.stop_train_wer is not None and cfg.eval_interval
                and state.step % cfg.eval_interval == 0 and state.step >= cfg.min_updates):
            train_wer = corpus_wer(train_utts, transcribe(model, train_utts, vocab, beam=1))
            log.info("step %d train WER %.2f", state.step, train_wer)
            stop = train_wer <= cfg.stop_train_wer and state.step >= cfg.min_updates
        history.append(row)
        _append_log(log_path, row)
        if at_save or stop:
            checkpoints.append(save_training_state(model, state, out_dir, state.step))
        if stop:
            break
    return TrainResult(model, history, checkpoints, state.step, train_wer)


def _format(value):
    return f"{value:.10g}" if isinstance(value, float) else str(value)


def _write_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow([_format(row[k]) for k in LOG_FIELDS])


def _append_log(path, row):
    with open(path, "a", newline="", encoding="utf-8") as f:
        csv.writer(f, lineterminator="\n").writerow([_format(row[k]) for k in LOG_FIELDS])


def _read_log(path) -> list[dict]:
    if not Path(path).exists():
        return []
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# seed statistics


@dataclass
class SeedSummary:
    wers: list[float]
    mean: float
    stderr: float


def summarize(wers: Sequence[float]) -> SeedSummary:
    """Mean and standard deviation of the mean (sample std / sqrt(n))."""
    x = np.asarray(wers, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two seeds")
    return SeedSummary(list(map(float, x)), float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x))))


def welch_p_value(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-tailed Welch t-test p-value.

    With zero variance in both samples the test is undefined; identical means
    then give p = 1 and different means p = 0.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if np.var(a) == 0 and np.var(b) == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def relative_reduction(wer_a: float, wer_b: float) -> float:
    return 100.0 * (wer_a - wer_b) / wer_a if wer_a else 0.0


def seed_sweep(train_utts, test_utts, model_cfg: ModelConfig, cfg: TrainConfig,
               seeds: Sequence[int], out_dir, beam: int = 5, vocab: Vocab | None = None,
               n_average: int = 10):
    """Train and decode once per seed; returns (summary, per-seed reports)."""
    from .decode_score import average_checkpoints

    if len(seeds) < 2:
        raise ValueError("seed_sweep needs at least two seeds")
    vocab = vocab or Vocab()
    wers, reports = [], {}
    for seed in seeds:
        run_dir = Path(out_dir) / f"seed{seed}"
        result = train(train_utts, model_cfg, cfg, seed, run_dir, vocab=vocab)
        ckpts = list_checkpoints(run_dir)[-n_average:]
        result.model.load_tensors(average_checkpoints(ckpts))
        hyps = transcribe(result.model, test_utts, vocab, beam)
        ref = {u.id: u.transcript for u in test_utts}
        reports[seed] = [(uid, align_and_score(ref[uid], text)) for uid, text in hyps]
        wers.append(corpus_wer(test_utts, hyps))
    return summarize(wers), reports

"""Decoding, checkpoint averaging and word-level error analysis."""

from __future__ import annotations

import csv
import os
import string
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyReference, ManifestMismatch, NoCheckpoints
from .tensor_core import load_checkpoint

StepFn = Callable[[list[tuple[int, ...]]], np.ndarray]


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool


def greedy_search(step_fn: StepFn, bos: int, eos: int, max_len: int) -> Hypothesis:
    prefix, score = (bos,), 0.0
    for _ in range(max_len):
        lp = np.asarray(step_fn([prefix]))[0]
        tok = int(np.argmax(lp))
        prefix, score = prefix + (tok,), score + float(lp[tok])
        if tok == eos:
            return Hypothesis(prefix[1:], score, True)
    return Hypothesis(prefix[1:], score, False)


def beam_search(step_fn: StepFn, bos: int, eos: int, beam: int = 5, max_len: int = 100,
                length_normalize: bool = False) -> Hypothesis:
    """Beam search over ``step_fn``, which maps prefixes to next-token log-probs.

    Each step expands every live prefix by the whole vocabulary and keeps the
    ``beam`` best candidates by total log-probability; candidates ending in
    ``eos`` retire to the finished pool. Equal scores are ordered by token
    sequence, smallest ids first. The best finished hypothesis wins; if none
    finishes within ``max_len`` tokens the best live one is returned.
    """
    def rank(tokens, score):
        value = score / len(tokens) if length_normalize and tokens else score
        return (-value, tokens)

    live: list[tuple[tuple[int, ...], float]] = [((bos,), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_len):
        lp = np.asarray(step_fn([p for p, _ in live]), dtype=np.float64)
        candidates = []
        for (prefix, score), row in zip(live, lp):
            for tok, tok_lp in enumerate(row):
                candidates.append((prefix[1:] + (tok,), score + float(tok_lp)))
        candidates.sort(key=lambda c: rank(*c))
        live = []
        for tokens, score in candidates[:beam]:
            if tokens[-1] == eos:
                finished.append((tokens, score))
            else:
                live.append(((bos,) + tokens, score))
        if not live:
            break
        if finished and not length_normalize:
            # Scores only decrease as tokens are added.
            if max(s for _, s in finished) >= max(s for _, s in live):
                break

    if finished:
        tokens, score = min(finished, key=lambda c: rank(*c))
        return Hypothesis(tokens, score, True)
    tokens, score = min(((p[1:], s) for p, s in live), key=lambda c: rank(*c))
    return Hypothesis(tokens, score, False)


def average_checkpoints(paths: Sequence[str | os.PathLike]) -> "OrderedDict[str, np.ndarray]":
    """Element-wise mean of parameters across checkpoint files.

    Values are sorted and averaged as offsets from their minimum, so the
    result is bitwise independent of the order of ``paths`` and identical
    checkpoints average to themselves exactly.
    """
    if not paths:
        raise NoCheckpoints("no checkpoints to average")
    loaded = [load_checkpoint(p)[0] for p in paths]
    ref = loaded[0]
    for path, ck in zip(paths[1:], loaded[1:]):
        if list(ck.keys()) != list(ref.keys()):
            raise ManifestMismatch(f"{path}: parameter names differ from {paths[0]}")
        for name, arr in ck.items():
            if arr.shape != ref[name].shape:
                raise ManifestMismatch(f"{path}: {name} has shape {arr.shape}, "
                                       f"expected {ref[name].shape}")
    out = OrderedDict()
    for name in ref:
        stack = np.sort(np.stack([ck[name] for ck in loaded]), axis=0)
        out[name] = stack[0] + (stack - stack[0]).sum(axis=0) / len(loaded)
    return out


_PUNCT = string.punctuation


def tokenize_words(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip leading/trailing punctuation."""
    words = (w.strip(_PUNCT) for w in text.lower().split())
    return [w for w in words if w]


@dataclass
class WERReport:
    n_ref_words: int
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.n_ref_words == 0:
            raise EmptyReference("WER is undefined for an empty reference")
        return 100.0 * self.errors / self.n_ref_words

    def __add__(self, other: "WERReport") -> "WERReport":
        return WERReport(self.n_ref_words + other.n_ref_words,
                         self.substitutions + other.substitutions,
                         self.deletions + other.deletions,
                         self.insertions + other.insertions)


def align(ref: Sequence[str], hyp: Sequence[str]) -> list[tuple[str, str | None, str | None]]:
    """Minimum-edit alignment as ``(op, ref_word, hyp_word)`` with op in C/S/D/I.

    Among equal-cost alignments the backtrace prefers a match or substitution,
    then a deletion, then an insertion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)

    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("C" if ref[i - 1] == hyp[j - 1] else "S", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops.append(("D", ref[i - 1], None))
            i -= 1
        else:
            ops.append(("I", None, hyp[j - 1]))
            j -= 1
    return ops[::-1]


def align_and_score(ref: str | Sequence[str], hyp: str | Sequence[str]) -> WERReport:
    ref_words = tokenize_words(ref) if isinstance(ref, str) else list(ref)
    hyp_words = tokenize_words(hyp) if isinstance(hyp, str) else list(hyp)
    if not ref_words:
        raise EmptyReference("reference has no words")
    counts = {"S": 0, "D": 0, "I": 0, "C": 0}
    for op, _, _ in align(ref_words, hyp_words):
        counts[op] += 1
    return WERReport(len(ref_words), counts["S"], counts["D"], counts["I"])


@dataclass
class ErrorDistribution:
    group: str
    total: WERReport
    degenerate: bool

    def shares(self) -> tuple[float, float, float]:
        e = self.total.errors
        if e == 0:
            return 0.0, 0.0, 0.0
        return (self.total.substitutions / e, self.total.deletions / e, self.total.insertions / e)

    def row(self) -> dict:
        s, d, i = self.shares()
        return {"group": self.group, "S": self.total.substitutions, "D": self.total.deletions,
                "I": self.total.insertions, "S_share": s, "D_share": d, "I_share": i,
                "wer": self.total.wer}


def error_distribution(reports: Sequence[WERReport], group: str = "all") -> ErrorDistribution:
    """Pool S/D/I counts over utterances.

    When the pool has no errors at all the shares are reported as 0 and
    ``degenerate`` is set.
    """
    if not reports:
        raise ValueError("error_distribution needs at least one report")
    total = WERReport(0)
    for r in reports:
        total = total + r
    return ErrorDistribution(group, total, total.errors == 0)


def merge_distributions(a: ErrorDistribution, b: ErrorDistribution, group: str) -> ErrorDistribution:
    total = a.total + b.total
    return ErrorDistribution(group, total, total.errors == 0)


AGGREGATE_FIELDS = ["group", "S", "D", "I", "S_share", "D_share", "I_share", "wer"]
SCORE_FIELDS = ["id", "n_ref", "S", "D", "I", "wer"]


def write_aggregate_csv(path, distributions: Sequence[ErrorDistribution]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=AGGREGATE_FIELDS, lineterminator="\n")
        w.writeheader()
        for dist in distributions:
            w.writerow(dist.row())


def write_score_csv(path, scored: Sequence[tuple[str, WERReport]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for uid, r in scored:
            w.writerow([uid, r.n_ref_words, r.substitutions, r.deletions, r.insertions,
                        f"{r.wer:.4f}"])


def read_score_csv(path) -> list[tuple[str, WERReport]]:
    with open(path, newline="", encoding="utf-8") as f:
        return [(row["id"], WERReport(int(row["n_ref"]), int(row["S"]), int(row["D"]), int(row["I"])))
                for row in csv.DictReader(f)]


def write_hypotheses(path, hyps: Sequence[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for uid, text in hyps:
            f.write(f"{uid}\t{text}\n")


def read_hypotheses(path) -> "OrderedDict[str, str]":
    out = OrderedDict()
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line:
                uid, _, text = line.partition("\t")
                out[uid] = text
    return out

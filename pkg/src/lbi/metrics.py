"""Answer-string evaluation: exact match, token-bag F1, and BLEU-n.

All metrics lowercase and whitespace-normalize both sides first. F1 is
computed per example over token multisets (clipped counts) and averaged
over examples; BLEU is corpus-level with uniform weights over orders
1..n and the standard brevity penalty.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from math import exp, log
from pathlib import Path

from .errors import ContractError, DataError


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def _tokens(text: str) -> list[str]:
    return normalize_answer(text).split()


def _check_aligned(preds, golds) -> None:
    if len(preds) != len(golds):
        raise ContractError(
            f"{len(preds)} predictions vs {len(golds)} references"
        )
    if len(preds) == 0:
        raise ContractError("need at least one prediction")


def exact_match_accuracy(preds: list[str], golds: list[str]) -> float:
    _check_aligned(preds, golds)
    hits = sum(
        normalize_answer(p) == normalize_answer(g) for p, g in zip(preds, golds)
    )
    return hits / len(preds)


def token_f1(pred: str, gold: str) -> float:
    """Multiset precision/recall F1 for one example.

    Empty vs empty scores 1; empty vs non-empty scores 0.
    """
    p_tokens = _tokens(pred)
    g_tokens = _tokens(gold)
    if not p_tokens and not g_tokens:
        return 1.0
    overlap = sum((Counter(p_tokens) & Counter(g_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(p_tokens)
    recall = overlap / len(g_tokens)
    return 2 * precision * recall / (precision + recall)


def macro_token_f1(preds: list[str], golds: list[str]) -> float:
    _check_aligned(preds, golds)
    return sum(token_f1(p, g) for p, g in zip(preds, golds)) / len(preds)


def _ngram_counts(tokens: list[str], k: int) -> Counter:
    return Counter(tuple(tokens[i : i + k]) for i in range(len(tokens) - k + 1))


def bleu_n(preds: list[str], golds: list[str], n: int) -> float:
    """Corpus BLEU restricted to order ``n``.

    Geometric mean of clipped k-gram precisions for k = 1..n times the
    brevity penalty exp(1 - r/c) when the candidate corpus is shorter
    than the reference corpus; 0 whenever any precision is 0.
    """
    if n not in (1, 2, 3):
        raise ContractError(f"BLEU order must be 1, 2, or 3, got {n}")
    _check_aligned(preds, golds)
    pred_tokens = [_tokens(p) for p in preds]
    gold_tokens = [_tokens(g) for g in golds]
    c = sum(len(t) for t in pred_tokens)
    r = sum(len(t) for t in gold_tokens)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        clipped = 0
        total = 0
        for p_toks, g_toks in zip(pred_tokens, gold_tokens):
            counts = _ngram_counts(p_toks, k)
            ref = _ngram_counts(g_toks, k)
            total += sum(counts.values())
            clipped += sum(min(cnt, ref[gram]) for gram, cnt in counts.items())
        if clipped == 0 or total == 0:
            return 0.0
        log_sum += log(clipped / total) / n
    bp = 1.0 if c > r else exp(1.0 - r / c)
    return bp * exp(log_sum)


def per_type_accuracy(
    preds: list[str],
    golds: list[str],
    types: list[str],
    allowed: tuple[str, ...] | None = None,
) -> dict[str, float]:
    """Exact-match accuracy within each question-type group.

    Types absent from the batch are absent from the map; unknown tags
    (outside ``allowed``, default the data module's taxonomy) error.
    """
    _check_aligned(preds, golds)
    if len(types) != len(preds):
        raise ContractError(f"{len(types)} types vs {len(preds)} predictions")
    if allowed is None:
        from .data import QUESTION_TYPES

        allowed = QUESTION_TYPES
    grouped: dict[str, list[int]] = {}
    for i, tag in enumerate(types):
        if tag not in allowed:
            raise DataError(f"unknown question type tag {tag!r}")
        grouped.setdefault(tag, []).append(i)
    return {
        tag: exact_match_accuracy([preds[i] for i in idx], [golds[i] for i in idx])
        for tag, idx in sorted(grouped.items())
    }


@dataclass
class EvalReport:
    accuracy: float
    f1: float
    bleu: dict[int, float]
    per_type: dict[str, float]
    per_type_counts: dict[str, int]
    n_examples: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "bleu": {str(k): v for k, v in sorted(self.bleu.items())},
            "per_type_accuracy": dict(sorted(self.per_type.items())),
            "per_type_counts": dict(sorted(self.per_type_counts.items())),
            "n_examples": self.n_examples,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_tsv(self, path=None) -> str:
        """Header plus one value row, for quick tabulation."""
        cols = ["accuracy", "f1", "bleu1", "bleu2", "bleu3"]
        vals = [self.accuracy, self.f1, self.bleu[1], self.bleu[2], self.bleu[3]]
        for tag in sorted(self.per_type):
            cols.append(f"acc_{tag}")
            vals.append(self.per_type[tag])
        text = "\t".join(cols) + "\n" + "\t".join(repr(v) for v in vals) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def evaluate_answers(preds: list[str], golds: list[str], types: list[str]) -> EvalReport:
    counts = Counter(types)
    return EvalReport(
        accuracy=exact_match_accuracy(preds, golds),
        f1=macro_token_f1(preds, golds),
        bleu={n: bleu_n(preds, golds, n) for n in (1, 2, 3)},
        per_type=per_type_accuracy(preds, golds, types),
        per_type_counts=dict(sorted(counts.items())),
        n_examples=len(preds),
    )

"""Alignment-based scoring: WER with biased/unbiased/rare breakdowns, and
inference-time bias-list construction with distractors.

Attribution convention: substitutions and deletions are classified by the
reference word's membership, insertions by the hypothesis word's
membership; denominators are reference word counts per class.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .rarewords import RareWordSet
from .textnorm import normalize_word, normalize_words

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


@dataclass(frozen=True)
class EditOp:
    op: str
    ref: Optional[str]
    hyp: Optional[str]


def align(ref: Sequence[str], hyp: Sequence[str]) -> List[EditOp]:
    """Minimal-cost alignment with unit costs.

    Ties are broken preferring match > sub > del > ins so the script is
    deterministic.
    """
    R, H = len(ref), len(hyp)
    dp = [[0] * (H + 1) for _ in range(R + 1)]
    for i in range(1, R + 1):
        dp[i][0] = i
    for j in range(1, H + 1):
        dp[0][j] = j
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            same = dp[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            dp[i][j] = min(same, dp[i - 1][j] + 1, dp[i][j - 1] + 1)
    ops: List[EditOp] = []
    i, j = R, H
    while i > 0 or j > 0:
        cost = dp[i][j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and cost == dp[i - 1][j - 1]:
            ops.append(EditOp(MATCH, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and cost == dp[i - 1][j - 1] + 1:
            ops.append(EditOp(SUB, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and cost == dp[i - 1][j] + 1:
            ops.append(EditOp(DEL, ref[i - 1], None))
            i = i - 1
        else:
            ops.append(EditOp(INS, None, hyp[j - 1]))
            j = j - 1
    ops.reverse()
    return ops


def alignment_cost(script: Sequence[EditOp]) -> int:
    return sum(1 for op in script if op.op != MATCH)


@dataclass
class ScoreReport:
    """WER with unbiased/biased/rare splits; rates are percentages.

    A rate is None when its reference denominator is zero anywhere in the
    scored set (so an absent bias list gives an undefined, not 0, B-WER).
    """

    wer: Optional[float]
    u_wer: Optional[float]
    b_wer: Optional[float]
    r_wer: Optional[float]
    counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "wer": self.wer,
            "u_wer": self.u_wer,
            "b_wer": self.b_wer,
            "r_wer": self.r_wer,
            "counts": dict(self.counts),
        }


def _rate(errors: int, denom: int) -> Optional[float]:
    if denom == 0:
        return None
    return 100.0 * errors / denom


def score(
    pairs: Iterable[Tuple[Sequence[str], Sequence[str], Iterable[str]]],
    rare_set: Optional[RareWordSet] = None,
) -> ScoreReport:
    """Score (reference, hypothesis, bias list) triples.

    Words are normalized before alignment; each utterance's bias list
    applies only to itself. The rare split uses ``rare_set`` membership with
    the same attribution rules as the bias split.
    """
    c = {
        "ref_words": 0, "ref_bias_words": 0, "ref_rare_words": 0,
        "sub": 0, "ins": 0, "del": 0,
        "sub_b": 0, "ins_b": 0, "del_b": 0,
        "sub_u": 0, "ins_u": 0, "del_u": 0,
        "sub_r": 0, "ins_r": 0, "del_r": 0,
    }
    for ref_raw, hyp_raw, bias_raw in pairs:
        ref = [normalize_word(w) for w in ref_raw]
        hyp = [normalize_word(w) for w in hyp_raw]
        bias: Set[str] = {normalize_word(w) for w in bias_raw}
        c["ref_words"] += len(ref)
        c["ref_bias_words"] += sum(1 for w in ref if w in bias)
        if rare_set is not None:
            c["ref_rare_words"] += sum(1 for w in ref if w in rare_set)
        for op in align(ref, hyp):
            if op.op == MATCH:
                continue
            word = op.hyp if op.op == INS else op.ref
            c[op.op] += 1
            c[f"{op.op}_b" if word in bias else f"{op.op}_u"] += 1
            if rare_set is not None and word in rare_set:
                c[f"{op.op}_r"] += 1
    total_err = c["sub"] + c["ins"] + c["del"]
    b_err = c["sub_b"] + c["ins_b"] + c["del_b"]
    u_err = c["sub_u"] + c["ins_u"] + c["del_u"]
    r_err = c["sub_r"] + c["ins_r"] + c["del_r"]
    return ScoreReport(
        wer=_rate(total_err, c["ref_words"]),
        u_wer=_rate(u_err, c["ref_words"] - c["ref_bias_words"]),
        b_wer=_rate(b_err, c["ref_bias_words"]),
        r_wer=_rate(r_err, c["ref_rare_words"]) if rare_set is not None else None,
        counts=c,
    )


# ----------------------------------------------------------- bias lists


def build_inference_bias_list(
    ref_words: Sequence[str],
    rare_set: RareWordSet,
    n_distractors: int,
    pool: Sequence[str],
    level: str = "utterance",
    rng: Optional[np.random.Generator] = None,
    group_refs: Optional[Sequence[Sequence[str]]] = None,
    total_size: Optional[int] = None,
) -> List[str]:
    """Per-utterance bias list: the reference's rare words plus distractors.

    Args:
        ref_words: This utterance's reference words.
        rare_set: Membership test for rare words.
        n_distractors: Distractors added from ``pool`` (uniform, without
            replacement). Ignored when ``total_size`` is given, in which
            case distractors fill the list up to that size.
        pool: Candidate distractor words (subset of the rare set).
        level: "utterance", or "chapter"/"book" with ``group_refs`` holding
            every reference of the grouping; rare words are then the union
            over the group.
        rng: Required when distractors are drawn.
        group_refs: See ``level``.

    Returns:
        Normalized words, rare words first, then shuffled distractors.
    """
    if level not in ("utterance", "chapter", "book"):
        raise ValueError(f"unknown bias-list level {level!r}")
    if level == "utterance":
        source = [list(ref_words)]
    else:
        if group_refs is None:
            raise ValueError(f"{level}-level lists need the grouping's references")
        source = [list(r) for r in group_refs]
    rare_words: List[str] = []
    seen: Set[str] = set()
    for ref in source:
        for w in ref:
            norm = normalize_word(w)
            if norm and norm in rare_set and norm not in seen:
                seen.add(norm)
                rare_words.append(norm)
    if total_size is not None:
        n_distractors = max(0, total_size - len(rare_words))
    if n_distractors < 0:
        raise ValueError("n_distractors must be >= 0")
    chosen: List[str] = []
    if n_distractors > 0:
        candidates = sorted({normalize_word(w) for w in pool} - seen)
        if len(candidates) < n_distractors:
            warnings.warn(
                f"distractor pool has {len(candidates)} words, requested {n_distractors}; taking all"
            )
            n_distractors = len(candidates)
        if rng is None:
            raise ValueError("rng required to sample distractors")
        perm = rng.permutation(len(candidates))
        chosen = [candidates[i] for i in perm[:n_distractors]]
    return rare_words + chosen


# ----------------------------------------------------------------- file IO


def load_trn(path) -> Dict[str, List[str]]:
    """Read "utt_id<TAB>words" lines into id -> normalized word list."""
    out: Dict[str, List[str]] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" in line:
                utt_id, text = line.split("\t", 1)
            else:
                utt_id, text = line.split(" ", 1)
            out[utt_id] = normalize_words(text)
    return out


def save_trn(path, table: Dict[str, Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt_id in sorted(table):
            f.write(f"{utt_id}\t{' '.join(table[utt_id])}\n")


def load_bias_lists(path) -> Dict[str, List[str]]:
    """Read per-utterance bias lists from JSON {utt_id: [words]}."""
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    return {k: [normalize_word(w) for w in v] for k, v in raw.items()}


def save_bias_lists(path, lists: Dict[str, Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({k: list(v) for k, v in lists.items()}, f, indent=1, sort_keys=True)


def _fmt(rate: Optional[float]) -> str:
    return "n/a" if rate is None else f"{rate:.2f}"


def report_table(report: ScoreReport, label: str = "system") -> str:
    """Fixed-width table with the WER(U-WER/B-WER) cell format."""
    cell = f"{_fmt(report.wer)}({_fmt(report.u_wer)}/{_fmt(report.b_wer)})"
    lines = [
        f"{'model':<20}{'WER(U-WER/B-WER)':>24}{'R-WER':>10}",
        f"{label:<20}{cell:>24}{_fmt(report.r_wer):>10}",
        (
            f"errors: sub={report.counts.get('sub', 0)}"
            f" ins={report.counts.get('ins', 0)}"
            f" del={report.counts.get('del', 0)}"
            f" / ref_words={report.counts.get('ref_words', 0)}"
        ),
    ]
    return "\n".join(lines)

"""Greedy and beam-search decoding with optional biasing and shallow fusion
against a prefix automaton over bias-word subword sequences.

Beam search is alignment-length synchronous: every surviving hypothesis has
taken the same number of blank/label steps, finished hypotheses stay in the
pool as frozen competitors, and hypotheses with identical label sequences
are merged by log-sum. With beam width 1 the search reproduces greedy
decoding exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import Tensor

from .biasing import BiasEmbeddings
from .model import PredictorState, Transducer


# ----------------------------------------------------------------- bias FST


@dataclass
class _TrieNode:
    children: Dict[int, int] = field(default_factory=dict)
    final: bool = False


@dataclass(frozen=True)
class FstState:
    """Position in the prefix automaton plus the revocable pending boost."""

    node: int = 0
    pending: float = 0.0


@dataclass
class BiasBoostFst:
    """Prefix trie over bias-entry subword sequences with per-edge boosts.

    Matching a token earns ``boost_per_token`` immediately; abandoning a
    partial match pays the accumulated pending boost back. Reaching a
    word-final node banks the boost irrevocably and returns to the root
    (when one entry prefixes another, the shorter entry wins).
    """

    nodes: List[_TrieNode]
    boost_per_token: float

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return sum(len(n.children) for n in self.nodes)

    def start(self) -> FstState:
        return FstState(node=0, pending=0.0)


def build_bias_fst(entries: Sequence, boost_per_token: float) -> BiasBoostFst:
    """Build the shared-prefix automaton from deduplicated bias entries."""
    nodes = [_TrieNode()]
    for entry in entries:
        cur = 0
        for token in entry.subword_ids:
            nxt = nodes[cur].children.get(token)
            if nxt is None:
                nodes.append(_TrieNode())
                nxt = len(nodes) - 1
                nodes[cur].children[token] = nxt
            cur = nxt
        nodes[cur].final = True
    return BiasBoostFst(nodes=nodes, boost_per_token=boost_per_token)


def fst_advance(fst: BiasBoostFst, state: FstState, token: int) -> Tuple[float, FstState]:
    """Consume one emitted token; returns (score delta, new state).

    Mismatches mid-path revoke the pending boost, reset to the root, and
    retry the token from there.
    """
    node = fst.nodes[state.node]
    child = node.children.get(token)
    if child is not None:
        b = fst.boost_per_token
        if fst.nodes[child].final:
            return b, FstState(node=0, pending=0.0)
        return b, FstState(node=child, pending=state.pending + b)
    if state.node == 0:
        return 0.0, state
    retry_delta, new_state = fst_advance(fst, fst.start(), token)
    return -state.pending + retry_delta, new_state


# --------------------------------------------------------------- sessions


class DecoderSession:
    """Per-utterance view of a (possibly biased) transducer.

    Routes encoder frames, predictor advances, and joint evaluations
    through the attached biasing module according to its query site;
    ``bias_embeddings=None`` decodes the base model.
    """

    def __init__(self, model: Transducer, bias_embeddings: Optional[BiasEmbeddings] = None):
        self.model = model
        self.E = bias_embeddings
        self.variant = None
        if bias_embeddings is not None:
            if model.biasing is None:
                raise ValueError("bias embeddings given but no biasing module attached")
            self.variant = model.biasing.variant
        self.blank = 0

    def encode(self, features: Tensor) -> Tensor:
        """[T, D1] features -> [T', H] encoder states (biased if configured)."""
        enc, lens = self.model.encode_speech(
            features.unsqueeze(0), torch.tensor([features.shape[0]])
        )
        enc = enc[0, : int(lens[0])]
        if self.variant in ("encoder", "enc-pre"):
            enc = self.model.biasing.bias_encoder(enc, self.E)
        return enc

    def start(self) -> Tuple[Tensor, PredictorState]:
        state = self.model.predictor.initial_state()
        return self.advance(state, self.blank)

    def advance(self, state: PredictorState, token: int) -> Tuple[Tensor, PredictorState]:
        emb, out, new_state = self.model.predictor.step(state, token)
        if self.variant in ("predictor", "enc-pre"):
            out = self.model.biasing.bias_predictor(
                emb.unsqueeze(0), out.unsqueeze(0), self.E
            )[0]
        return out, new_state

    def log_probs(self, enc_t: Tensor, pred_out: Tensor) -> Tensor:
        joint = self.model.jointer(enc_t, pred_out)
        if self.variant == "jointer":
            joint = self.model.biasing.bias_joint(joint.unsqueeze(0), self.E)[0]
        return self.model.output.log_probs(joint)


# ----------------------------------------------------------------- greedy


def greedy_decode(
    model: Transducer,
    features: Tensor,
    bias_embeddings: Optional[BiasEmbeddings] = None,
    max_symbols_per_frame: int = 5,
) -> List[int]:
    """Frame-by-frame argmax decoding.

    At each frame, up to ``max_symbols_per_frame`` non-blank argmax tokens
    are emitted (each advancing the predictor); the frame is consumed on
    blank or at the cap.
    """
    session = DecoderSession(model, bias_embeddings)
    with torch.no_grad():
        enc = session.encode(features)
        pred_out, state = session.start()
        tokens: List[int] = []
        for t in range(enc.shape[0]):
            for _ in range(max_symbols_per_frame):
                lp = session.log_probs(enc[t], pred_out)
                best = int(lp.argmax())
                if best == session.blank:
                    break
                tokens.append(best)
                pred_out, state = session.advance(state, best)
    return tokens


# ------------------------------------------------------------- beam search


@dataclass
class Hypothesis:
    """Beam-search state: emitted tokens, fused score, and automata."""

    tokens: Tuple[int, ...]
    log_score: float
    pred_out: Optional[Tensor]
    predictor_state: Optional[PredictorState]
    fst_state: FstState
    t: int
    syms_this_frame: int = 0
    finished: bool = False

    def final_score(self) -> float:
        """Score with any pending (unbanked) boost revoked."""
        return self.log_score - self.fst_state.pending


def _logaddexp(a: float, b: float) -> float:
    if a == float("-inf"):
        return b
    if b == float("-inf"):
        return a
    hi, lo = (a, b) if a >= b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def _merge(pool: Dict, key, hyp: Hypothesis) -> None:
    old = pool.get(key)
    if old is None:
        pool[key] = hyp
        return
    keep = old if old.log_score >= hyp.log_score else hyp
    pool[key] = replace(keep, log_score=_logaddexp(old.log_score, hyp.log_score),
                        syms_this_frame=min(old.syms_this_frame, hyp.syms_this_frame))


def beam_search(
    model: Transducer,
    features: Tensor,
    beam_width: int,
    bias_embeddings: Optional[BiasEmbeddings] = None,
    fst: Optional[BiasBoostFst] = None,
    max_symbols_per_frame: int = 5,
    nbest: int = 1,
) -> List[Hypothesis]:
    """Alignment-synchronous beam search with optional shallow fusion.

    Non-blank expansions add the transducer log-probability plus the FST
    score delta; finished hypotheses are ranked by their score with pending
    boosts revoked.

    Returns:
        Up to ``nbest`` finished hypotheses, best first.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    session = DecoderSession(model, bias_embeddings)
    with torch.no_grad():
        enc = session.encode(features)
        T = enc.shape[0]
        pred_out, state = session.start()
        start_fst = fst.start() if fst is not None else FstState()
        pool: List[Hypothesis] = [
            Hypothesis(
                tokens=(), log_score=0.0, pred_out=pred_out,
                predictor_state=state, fst_state=start_fst, t=0,
            )
        ]
        max_steps = T * (1 + max_symbols_per_frame) + 1
        for _ in range(max_steps):
            if all(h.finished for h in pool):
                break
            candidates: Dict = {}
            for hyp in pool:
                if hyp.finished:
                    _merge(candidates, (hyp.tokens, "done"), hyp)
                    continue
                lp = session.log_probs(enc[hyp.t], hyp.pred_out)
                blank_score = hyp.log_score + float(lp[session.blank])
                moved = replace(
                    hyp, log_score=blank_score, t=hyp.t + 1, syms_this_frame=0,
                    finished=hyp.t + 1 == T,
                )
                key = (moved.tokens, "done" if moved.finished else moved.t)
                _merge(candidates, key, moved)
                if hyp.syms_this_frame >= max_symbols_per_frame:
                    continue
                order = torch.argsort(lp, descending=True)
                picked = 0
                for k in order.tolist():
                    if k == session.blank:
                        continue
                    delta, fstate = (
                        fst_advance(fst, hyp.fst_state, k) if fst is not None else (0.0, hyp.fst_state)
                    )
                    new_out, new_state = session.advance(hyp.predictor_state, k)
                    ext = Hypothesis(
                        tokens=hyp.tokens + (k,),
                        log_score=hyp.log_score + float(lp[k]) + delta,
                        pred_out=new_out,
                        predictor_state=new_state,
                        fst_state=fstate,
                        t=hyp.t,
                        syms_this_frame=hyp.syms_this_frame + 1,
                    )
                    _merge(candidates, (ext.tokens, ext.t), ext)
                    picked += 1
                    if picked >= beam_width:
                        break
            ranked = sorted(candidates.values(), key=lambda h: (-h.log_score, h.tokens))
            pool = ranked[:beam_width]
    finals = [h for h in pool if h.finished]
    finals.sort(key=lambda h: (-h.final_score(), h.tokens))
    return finals[:nbest]


def hypothesis_words(hyp_tokens: Sequence[int], vocab) -> str:
    """Decode emitted subword ids back to a word string."""
    return vocab.decode(list(hyp_tokens))

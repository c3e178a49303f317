"""Training objectives: transducer loss via forward-backward recursions,
CTC, auxiliary attention-decoder cross-entropy, internal-LM cross-entropy,
and their weighted combination.

All losses are computed in log space and returned as per-utterance sums
(nats); batch reduction is an ordered sum for determinism.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import Tensor

NEG_INF = float("-inf")

DEFAULT_ILMT_WEIGHT = 0.2
DEFAULT_WE_SCALE = 0.1


@dataclass
class AlignmentLattice:
    """Per-utterance log-probability lattice consumed by the transducer loss.

    Attributes:
        log_probs: [T, U+1, W] log-distributions over vocabulary plus blank.
        target: Label ids of length U (blank never appears).
        blank_id: Index of blank in the last axis.
    """

    log_probs: Tensor
    target: Sequence[int]
    blank_id: int = 0

    def __post_init__(self):
        if self.log_probs.dim() != 3:
            raise ValueError("log_probs must be [T, U+1, W]")
        t, u1, w = self.log_probs.shape
        if t < 1:
            raise ValueError("lattice needs at least one frame")
        if u1 != len(self.target) + 1:
            raise ValueError("second axis must be len(target) + 1")
        if any(not 0 <= y < w for y in self.target):
            raise ValueError("target id outside lattice width")
        if any(y == self.blank_id for y in self.target):
            raise ValueError("blank cannot appear in the target")

    def validate_normalized(self, tol: float = 1e-6) -> None:
        """Check every [t, u] slice is a normalized log-distribution."""
        z = torch.logsumexp(self.log_probs, dim=-1)
        worst = float(z.abs().max())
        if worst > tol:
            raise ValueError(f"lattice slices not normalized (|logsumexp| up to {worst:.3g})")


def _forward_alpha(lp_blank: Tensor, lp_label: Tensor) -> Tensor:
    """Forward scores over the padded [B, L, U+1] grid."""
    B, L, U1 = lp_blank.shape
    alpha = lp_blank.new_full((B, L, U1), NEG_INF)
    alpha[:, 0, 0] = 0.0
    for t in range(L):
        if t > 0:
            stay = alpha[:, t - 1, :] + lp_blank[:, t - 1, :]
            alpha[:, t, 0] = stay[:, 0]
        for u in range(1, U1):
            emit = alpha[:, t, u - 1] + lp_label[:, t, u - 1]
            if t == 0:
                alpha[:, t, u] = emit
            else:
                alpha[:, t, u] = torch.logaddexp(stay[:, u], emit)
    return alpha


def _backward_beta(
    lp_blank: Tensor, lp_label: Tensor, t_lens: Tensor, u_lens: Tensor
) -> Tensor:
    """Backward scores on an extended [B, L+1, U+1] grid.

    Row ``t_len`` of each item is the virtual termination row: zero at
    ``u_len`` and -inf elsewhere, so the final blank transition is uniform.
    """
    B, L, U1 = lp_blank.shape
    beta = lp_blank.new_full((B, L + 1, U1), NEG_INF)
    items = torch.arange(B, device=lp_blank.device)

    def stamp_virtual(t: int) -> None:
        sel = t_lens == t
        if bool(sel.any()):
            beta[items[sel], t, :] = NEG_INF
            beta[items[sel], t, u_lens[sel]] = 0.0

    stamp_virtual(L)
    emit_ok = torch.arange(U1, device=lp_blank.device).unsqueeze(0) < u_lens.unsqueeze(1)
    minus_inf = lp_blank.new_tensor(NEG_INF)
    for t in range(L - 1, -1, -1):
        blank_term = lp_blank[:, t, :] + beta[:, t + 1, :]
        row = lp_blank.new_full((B, U1), NEG_INF)
        row[:, U1 - 1] = blank_term[:, U1 - 1]
        for u in range(U1 - 2, -1, -1):
            emit = torch.where(emit_ok[:, u], lp_label[:, t, u] + row[:, u + 1], minus_inf)
            row[:, u] = torch.logaddexp(blank_term[:, u], emit)
        beta[:, t, :] = row
        stamp_virtual(t)
    return beta


def _transducer_forward_backward(
    log_probs: Tensor,
    targets: Tensor,
    t_lens: Tensor,
    u_lens: Tensor,
    blank: int,
) -> Tuple[Tensor, Tensor]:
    """Per-item negative log-likelihoods and gradients w.r.t. ``log_probs``."""
    B, L, U1, W = log_probs.shape
    lp_blank = log_probs[..., blank]
    gather_idx = targets.unsqueeze(1).expand(B, L, U1 - 1) if U1 > 1 else None
    if gather_idx is not None:
        lp_label = torch.zeros_like(lp_blank)
        lp_label[:, :, : U1 - 1] = log_probs[:, :, : U1 - 1, :].gather(
            -1, gather_idx.unsqueeze(-1)
        ).squeeze(-1)
    else:
        lp_label = torch.full_like(lp_blank, NEG_INF)

    alpha = _forward_alpha(lp_blank, lp_label)
    beta = _backward_beta(lp_blank, lp_label, t_lens, u_lens)
    ll = beta[:, 0, 0]

    t_idx = torch.arange(L, device=log_probs.device).view(1, L, 1)
    u_idx = torch.arange(U1, device=log_probs.device).view(1, 1, U1)
    in_time = t_idx < t_lens.view(B, 1, 1)
    blank_valid = in_time & (u_idx <= u_lens.view(B, 1, 1))
    label_valid = in_time & (u_idx < u_lens.view(B, 1, 1))

    expnt_blank = alpha + lp_blank + beta[:, 1:, :] - ll.view(B, 1, 1)
    occ_blank = torch.where(blank_valid, expnt_blank, torch.full_like(expnt_blank, NEG_INF)).exp()

    beta_up = torch.cat(
        [beta[:, :L, 1:], beta.new_full((B, L, 1), NEG_INF)], dim=2
    )
    expnt_label = alpha + lp_label + beta_up - ll.view(B, 1, 1)
    occ_label = torch.where(label_valid, expnt_label, torch.full_like(expnt_label, NEG_INF)).exp()

    grad = torch.zeros_like(log_probs)
    grad[..., blank] = -occ_blank
    if U1 > 1:
        grad[:, :, : U1 - 1, :].scatter_add_(
            -1, gather_idx.unsqueeze(-1), -occ_label[:, :, : U1 - 1].unsqueeze(-1)
        )
    return -ll, grad


class _TransducerLossFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, targets, t_lens, u_lens, blank):
        with torch.no_grad():
            loss, grad = _transducer_forward_backward(
                log_probs, targets, t_lens, u_lens, blank
            )
        ctx.save_for_backward(grad)
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad * grad_out.view(-1, 1, 1, 1), None, None, None, None


def transducer_loss_batch(
    log_probs: Tensor,
    targets: Tensor,
    t_lens: Tensor,
    u_lens: Tensor,
    blank: int = 0,
) -> Tensor:
    """Per-utterance transducer losses over a padded batch.

    Args:
        log_probs: [B, L, U_max+1, W] lattice log-probabilities.
        targets: [B, U_max] padded label ids.
        t_lens: Valid frame counts per item.
        u_lens: Valid label counts per item.
        blank: Blank index.

    Returns:
        [B] negative log-likelihoods; differentiable w.r.t. ``log_probs``.
    """
    return _TransducerLossFn.apply(log_probs, targets, t_lens, u_lens, blank)


def transducer_loss(lattice: AlignmentLattice, validate: bool = False) -> Tuple[float, Tensor]:
    """Loss and analytic gradient for one alignment lattice.

    The loss is the negative log-sum over all monotonic blank/label paths;
    the gradient is with respect to the lattice log-probabilities.
    """
    if validate:
        lattice.validate_normalized()
    lp = lattice.log_probs.unsqueeze(0)
    device = lp.device
    targets = torch.tensor([list(lattice.target)], dtype=torch.long, device=device) if lattice.target else torch.zeros(1, 0, dtype=torch.long, device=device)
    t_lens = torch.tensor([lp.shape[1]], device=device)
    u_lens = torch.tensor([len(lattice.target)], device=device)
    loss, grad = _transducer_forward_backward(lp, targets, t_lens, u_lens, lattice.blank_id)
    return float(loss[0]), grad[0]


def ctc_feasible(num_frames: int, target: Sequence[int]) -> bool:
    """CTC needs one frame per label plus one per adjacent repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return num_frames >= len(target) + repeats


def _ctc_alpha_loss(frame_log_probs: Tensor, target: Sequence[int], blank: int) -> Tensor:
    """Differentiable CTC negative log-likelihood for one utterance.

    Unreachable states carry a large finite negative score instead of -inf:
    logsumexp over all -inf has a NaN gradient, while -1e30 underflows to an
    exact zero occupancy in both value and gradient.
    """
    very_neg = -1e30
    T = frame_log_probs.shape[0]
    aug: List[int] = [blank]
    for y in target:
        aug.extend((y, blank))
    S = len(aug)
    aug_t = torch.tensor(aug, device=frame_log_probs.device)
    skip_ok = torch.zeros(S, dtype=torch.bool, device=frame_log_probs.device)
    for s in range(2, S):
        skip_ok[s] = aug[s] != blank and aug[s] != aug[s - 2]

    lp0 = frame_log_probs[0, aug_t]
    pieces = [lp0[0:1]]
    if S > 1:
        pieces.append(lp0[1:2])
    if S > 2:
        pieces.append(lp0.new_full((S - 2,), very_neg))
    alpha = torch.cat(pieces)
    for t in range(1, T):
        prev = torch.cat([alpha.new_full((1,), very_neg), alpha])[:S]
        prev2 = torch.cat([alpha.new_full((2,), very_neg), alpha])[:S]
        prev2 = torch.where(skip_ok, prev2, torch.full_like(prev2, very_neg))
        stacked = torch.stack([alpha, prev, prev2], dim=0)
        alpha = torch.logsumexp(stacked, dim=0) + frame_log_probs[t, aug_t]
    if S > 1:
        total = torch.logaddexp(alpha[S - 1], alpha[S - 2])
    else:
        total = alpha[S - 1]
    return -total


def ctc_loss(
    frame_log_probs: Tensor, target: Sequence[int], blank: int = 0
) -> Tuple[Tensor, Optional[Tensor], bool]:
    """CTC loss over blank-augmented targets, with the feasibility contract.

    Args:
        frame_log_probs: [T, W] per-frame log-distributions.
        target: Label ids (blank excluded).
        blank: Blank index.

    Returns:
        (loss, grad, feasible). Infeasible targets give +inf loss, a zero
        gradient, and ``feasible=False``.
    """
    T = frame_log_probs.shape[0]
    if not ctc_feasible(T, target):
        return (
            frame_log_probs.new_tensor(float("inf")),
            torch.zeros_like(frame_log_probs),
            False,
        )
    leaf = frame_log_probs.detach().requires_grad_(True)
    loss = _ctc_alpha_loss(leaf, target, blank)
    (grad,) = torch.autograd.grad(loss, leaf)
    return loss.detach(), grad, True


def ctc_loss_batch(
    enc_log_probs: Tensor,
    t_lens: Tensor,
    targets: Sequence[Sequence[int]],
    blank: int = 0,
) -> Tuple[Tensor, int]:
    """Summed differentiable CTC loss over a batch; infeasible items skipped.

    Returns:
        (total loss tensor, number of infeasible items).
    """
    total = enc_log_probs.new_zeros(())
    infeasible = 0
    for b, target in enumerate(targets):
        T = int(t_lens[b])
        if not ctc_feasible(T, target):
            infeasible += 1
            continue
        total = total + _ctc_alpha_loss(enc_log_probs[b, :T], target, blank)
    return total, infeasible


def aed_loss_batch(
    model,
    enc: Tensor,
    enc_lens: Tensor,
    targets: Tensor,
    u_lens: Tensor,
    blank: int = 0,
) -> Tensor:
    """Teacher-forced cross-entropy of the auxiliary attention decoder.

    The blank id doubles as start and end sentinel; each item contributes
    ``u_len + 1`` cross-entropy terms (labels plus end-of-sequence).

    Returns:
        [B] per-item summed cross-entropies.
    """
    B, U = targets.shape
    device = targets.device
    sos = torch.full((B, 1), blank, dtype=torch.long, device=device)
    tgt_in = torch.cat([sos, targets], dim=1)
    logits = model.aed_decoder.logits(enc, enc_lens, tgt_in)
    logp = torch.log_softmax(logits, dim=-1)
    eos_pad = torch.full((B, 1), blank, dtype=torch.long, device=device)
    tgt_out = torch.cat([targets, eos_pad], dim=1).clone()
    steps = torch.arange(U + 1, device=device).unsqueeze(0)
    valid = steps <= u_lens.unsqueeze(1)
    tgt_out[steps == u_lens.unsqueeze(1)] = blank
    picked = logp.gather(-1, tgt_out.unsqueeze(-1)).squeeze(-1)
    return -(picked * valid.to(picked.dtype)).sum(dim=1)


def ilmt_loss_batch(
    model,
    pred_out: Tensor,
    targets: Tensor,
    u_lens: Tensor,
) -> Tensor:
    """Internal-LM cross-entropy: jointer fed zeros in place of the encoder.

    ``pred_out`` is the teacher-forced predictor stream [B, U+1, H]; each
    item contributes ``u_len`` next-token terms (blank kept in the softmax).

    Returns:
        [B] per-item summed cross-entropies.
    """
    B, U1, H = pred_out.shape
    zeros = pred_out.new_zeros(B, U1 - 1, H)
    h_joint = model.jointer(zeros, pred_out[:, : U1 - 1, :])
    logp = model.output.log_probs(h_joint)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    steps = torch.arange(U1 - 1, device=targets.device).unsqueeze(0)
    valid = steps < u_lens.unsqueeze(1)
    return -(picked * valid.to(picked.dtype)).sum(dim=1)


def aed_loss(model, enc: Tensor, target: Sequence[int], blank: int = 0) -> Tensor:
    """Single-utterance attention-decoder loss; ``enc`` is [L, H]."""
    if not target:
        raise ValueError("aed_loss needs a non-empty target")
    enc_b = enc.unsqueeze(0)
    lens = torch.tensor([enc.shape[0]], device=enc.device)
    tgt = torch.tensor([list(target)], dtype=torch.long, device=enc.device)
    u_lens = torch.tensor([len(target)], device=enc.device)
    return aed_loss_batch(model, enc_b, lens, tgt, u_lens, blank)[0]


def ilmt_loss(model, target: Sequence[int], blank: int = 0) -> Tensor:
    """Single-utterance internal-LM loss, teacher-forced over the target."""
    if not target:
        raise ValueError("ilmt_loss needs a non-empty target")
    device = model.output.fc.weight.device
    prefix = torch.tensor([[blank] + list(target)], dtype=torch.long, device=device)
    _, pred_out = model.predictor.unroll(prefix)
    tgt = torch.tensor([list(target)], dtype=torch.long, device=device)
    u_lens = torch.tensor([len(target)], device=device)
    return ilmt_loss_batch(model, pred_out, tgt, u_lens)[0]


@dataclass
class LossBreakdown:
    """Weighted multi-task objective and its parts (all nonnegative nats)."""

    transducer: float = 0.0
    ctc: float = 0.0
    aed: float = 0.0
    ilmt: float = 0.0
    we_text: float = 0.0
    we_phone: float = 0.0
    total: float = 0.0
    ctc_infeasible_count: int = 0

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(
            transducer=float(self.transducer),
            ctc=float(self.ctc),
            aed=float(self.aed),
            ilmt=float(self.ilmt),
            we_text=float(self.we_text),
            we_phone=float(self.we_phone),
            total=float(self.total),
            ctc_infeasible_count=int(self.ctc_infeasible_count),
        )

    def to_dict(self) -> dict:
        f = self.as_floats()
        return {
            "transducer": f.transducer,
            "ctc": f.ctc,
            "aed": f.aed,
            "ilmt": f.ilmt,
            "we_text": f.we_text,
            "we_phone": f.we_phone,
            "total": f.total,
            "ctc_infeasible_count": f.ctc_infeasible_count,
        }


def combined_loss(
    transducer=0.0,
    ctc=0.0,
    aed=0.0,
    ilmt=0.0,
    we_text=0.0,
    we_phone=0.0,
    ilmt_weight: float = DEFAULT_ILMT_WEIGHT,
    we_scale: float = DEFAULT_WE_SCALE,
    ctc_infeasible_count: int = 0,
) -> LossBreakdown:
    """Weighted sum of the training objectives.

    ``total = transducer + ctc + aed + ilmt_weight * ilmt
    + we_scale * (we_text + we_phone)``; parts may be floats or scalar
    tensors, so the total can stay differentiable.
    """
    if ilmt_weight < 0:
        raise ValueError("ilmt_weight must be >= 0")
    total = transducer + ctc + aed + ilmt_weight * ilmt + we_scale * (we_text + we_phone)
    return LossBreakdown(
        transducer=transducer,
        ctc=ctc,
        aed=aed,
        ilmt=ilmt,
        we_text=we_text,
        we_phone=we_phone,
        total=total,
        ctc_infeasible_count=ctc_infeasible_count,
    )

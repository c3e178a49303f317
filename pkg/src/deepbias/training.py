"""Training loops: from-scratch joint training with text injection,
biasing-module fine-tuning with group learning rates, per-batch bias-list
sampling, and feature augmentation.

The optimizer is plain SGD with global gradient-norm clipping (so the
one-step update is exactly ``p - lr * clip(g)``), with an optional momentum
and warmup preset for the pinned experiments.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .biasing import (
    BiasEmbeddings,
    BiasingModule,
    biased_streams,
    lattice_from_streams,
    make_bias_entry,
)
from .losses import (
    aed_loss_batch,
    combined_loss,
    ctc_loss_batch,
    ilmt_loss_batch,
    transducer_loss_batch,
)
from .model import ModelConfig, Transducer
from .phonemes import PhonemeLexicon
from .rarewords import RareWordSet, build_rare_set
from .subwords import SubwordVocab
from .textnorm import normalize_words
from .text_injection import RoutedExample, batch_concat, make_text_features, paired_text_swap

MODES = ("scratch", "scratch-ustr", "finetune-bias", "finetune-frozen")


@dataclass
class OptimizerGroups:
    """Per-group learning rates, freeze flags, and the step counter.

    The default update is plain SGD (``p <- p - lr * clip(g)``, optional
    momentum); ``optimizer="adam"`` is a preset for the pinned toy
    experiments, with the same group-LR and freezing semantics.
    """

    lr_biasing: float = 0.0
    lr_base: float = 0.0
    freeze_base: bool = False
    freeze_biasing: bool = False
    optimizer: str = "sgd"
    momentum: float = 0.0
    warmup_steps: int = 0
    clip_norm: float = 5.0
    step_count: int = 0
    velocities: Dict[str, torch.Tensor] = field(default_factory=dict, repr=False)
    _adam: Optional[torch.optim.Optimizer] = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr_biasing < 0 or self.lr_base < 0:
            raise ValueError("learning rates must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")

    def lr_for(self, group: str) -> float:
        lr = self.lr_biasing if group == "biasing" else self.lr_base
        if self.warmup_steps > 0:
            lr *= min(1.0, (self.step_count + 1) / self.warmup_steps)
        return lr

    def frozen(self, group: str) -> bool:
        return self.freeze_biasing if group == "biasing" else self.freeze_base


@dataclass
class SpecAugmentConfig:
    n_time_masks: int = 0
    max_time_width: int = 0
    n_feat_masks: int = 0
    max_feat_width: int = 0

    @property
    def active(self) -> bool:
        return self.n_time_masks > 0 or self.n_feat_masks > 0


@dataclass
class TrainRecipe:
    """Everything a training run needs besides the data itself."""

    mode: str = "scratch"
    epochs: int = 10
    batch_size_speech: int = 8
    batch_size_text: int = 0
    seed: int = 0
    deterministic: bool = True
    # optimization
    optimizer: str = "sgd"
    lr_base: float = 0.1
    lr_biasing: float = 0.1
    momentum: float = 0.0
    warmup_steps: int = 0
    clip_norm: float = 5.0
    # objective weights
    ilmt_weight: float = 0.2
    we_scale: float = 0.1
    # divide the optimized objective by the batch's target-token count so
    # gradient scale is batch-size independent; reported losses stay sums
    loss_normalization: str = "tokens"
    # biasing
    use_biasing: bool = False
    variant: str = "enc-pre"
    word_encoder_kind: str = "textual"
    bias_heads: int = 4
    rare_common_k: int = 0
    max_extra_bias_words: int = 20
    # subword regularization
    bpe_dropout: float = 0.1
    # text pathway
    text_mask_p: float = 0.15
    text_repeat_range: Tuple[int, int] = (1, 3)
    paired_swap_p: float = 0.15
    # augmentation
    augment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; pick one of {MODES}")
        if isinstance(self.augment, dict):
            self.augment = SpecAugmentConfig(**self.augment)
        self.text_repeat_range = tuple(self.text_repeat_range)
        if self.mode == "finetune-frozen" and not self.use_biasing:
            raise ValueError("finetune-frozen trains the biasing module; enable use_biasing")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["text_repeat_range"] = list(self.text_repeat_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRecipe":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainRecipe":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


def sample_training_bias_list(
    batch_transcripts: Sequence[str],
    rare2k: RareWordSet,
    max_extra: int,
    rng: np.random.Generator,
) -> List[str]:
    """Bias words for one batch: every rare word of the batch references,
    deduplicated, plus up to ``max_extra`` distractors drawn uniformly
    without replacement from the rest of the rare set; order shuffled.
    """
    if not batch_transcripts:
        raise ValueError("batch must be non-empty")
    batch_words: List[str] = []
    seen = set()
    for transcript in batch_transcripts:
        for w in normalize_words(transcript):
            if w not in seen and w in rare2k:
                seen.add(w)
                batch_words.append(w)
    candidates = sorted(rare2k.words - seen)
    n = min(max_extra, len(candidates))
    extras: List[str] = []
    if n > 0:
        perm = rng.permutation(len(candidates))
        extras = [candidates[i] for i in perm[:n]]
    out = batch_words + extras
    rng.shuffle(out)
    return out


def spec_augment(
    features: np.ndarray,
    n_time_masks: int,
    max_time_width: int,
    n_feat_masks: int,
    max_feat_width: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Zero random time spans and feature channels; everything else is
    untouched. Mask widths are drawn up to the given maxima."""
    T, D = features.shape
    if max_time_width > T or max_feat_width > D:
        raise ValueError("mask width exceeds feature dimensions")
    out = features.copy()
    for _ in range(n_time_masks):
        w = int(rng.integers(0, max_time_width + 1))
        if w:
            start = int(rng.integers(0, T - w + 1))
            out[start : start + w, :] = 0.0
    for _ in range(n_feat_masks):
        w = int(rng.integers(0, max_feat_width + 1))
        if w:
            start = int(rng.integers(0, D - w + 1))
            out[:, start : start + w] = 0.0
    return out


def _clip_gradients(params: List[torch.Tensor], clip_norm: float) -> None:
    if clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(params, clip_norm)


def sgd_step(model: Transducer, groups: OptimizerGroups) -> None:
    """One in-place update: ``p <- p - lr_group * clip(grad)`` with optional
    momentum; frozen groups stay bit-identical."""
    trainable = [
        p for name, p in model.named_parameters()
        if p.grad is not None and not groups.frozen(model.group_of(name))
    ]
    _clip_gradients(trainable, groups.clip_norm)
    with torch.no_grad():
        for name, p in model.named_parameters():
            group = model.group_of(name)
            if groups.frozen(group) or p.grad is None:
                continue
            lr = groups.lr_for(group)
            if lr == 0.0:
                continue
            g = p.grad
            if groups.momentum > 0.0:
                v = groups.velocities.get(name)
                if v is None:
                    v = torch.zeros_like(p)
                v.mul_(groups.momentum).add_(g)
                groups.velocities[name] = v
                g = v
            p.add_(g, alpha=-lr)
    groups.step_count += 1


def _adam_step(model: Transducer, groups: OptimizerGroups) -> None:
    if groups._adam is None:
        biasing, base = [], []
        for name, p in model.named_parameters():
            if groups.frozen(model.group_of(name)):
                continue
            (biasing if model.group_of(name) == "biasing" else base).append(p)
        param_groups = []
        if base:
            param_groups.append({"params": base, "lr": groups.lr_base, "kind": "base"})
        if biasing:
            param_groups.append({"params": biasing, "lr": groups.lr_biasing, "kind": "biasing"})
        groups._adam = torch.optim.Adam(param_groups)
    trainable = [p for g in groups._adam.param_groups for p in g["params"] if p.grad is not None]
    _clip_gradients(trainable, groups.clip_norm)
    for g in groups._adam.param_groups:
        lr = groups.lr_biasing if g["kind"] == "biasing" else groups.lr_base
        if groups.warmup_steps > 0:
            lr *= min(1.0, (groups.step_count + 1) / groups.warmup_steps)
        g["lr"] = lr
    groups._adam.step()
    groups.step_count += 1


def apply_update(model: Transducer, groups: OptimizerGroups) -> None:
    """Run the configured optimizer for one step."""
    if groups.optimizer == "adam":
        _adam_step(model, groups)
    else:
        sgd_step(model, groups)


@dataclass
class TrainContext:
    """Immutable per-run helpers shared by every step."""

    vocab: SubwordVocab
    lexicon: PhonemeLexicon
    rare2k: RareWordSet
    recipe: TrainRecipe


def _encode_transcript(ctx: TrainContext, transcript: str, rng) -> List[int]:
    words = [w.lower() for w in normalize_words(transcript)]
    return ctx.vocab.encode_words(words, ctx.recipe.bpe_dropout, rng)


def train_step(
    model: Transducer,
    routed_batch: Sequence,
    bias_words: Sequence[str],
    groups: OptimizerGroups,
    ctx: TrainContext,
    rng: np.random.Generator,
):
    """Forward, combined loss, analytic gradients, and one group-LR update.

    ``routed_batch`` holds RoutedExample items (speech, swapped, or text
    pathway). Returns the loss breakdown with float values.

    Raises:
        RuntimeError: On a non-finite loss, naming the offending utterances.
    """
    recipe = ctx.recipe
    dtype = next(model.parameters()).dtype
    speech_feats, speech_targets, speech_ids, speech_origins = [], [], [], []
    text_feats, text_targets, text_ids = [], [], []
    for item in routed_batch:
        if item.origin == "speech":
            feats = item.audio_features
            if recipe.augment.active:
                feats = spec_augment(
                    feats,
                    recipe.augment.n_time_masks,
                    recipe.augment.max_time_width,
                    recipe.augment.n_feat_masks,
                    recipe.augment.max_feat_width,
                    rng,
                )
            speech_feats.append(feats)
            speech_targets.append(_encode_transcript(ctx, item.transcript, rng))
            speech_ids.append(item.utt_id)
            speech_origins.append("speech")
        else:
            text_feats.append(item.text.features)
            text_targets.append(list(item.text.target_subwords))
            text_ids.append(item.utt_id)

    enc_s = lens_s = enc_t = lens_t = None
    if speech_feats:
        t_max = max(f.shape[0] for f in speech_feats)
        batch = torch.zeros(len(speech_feats), t_max, speech_feats[0].shape[1], dtype=dtype)
        lens = torch.tensor([f.shape[0] for f in speech_feats])
        for i, f in enumerate(speech_feats):
            batch[i, : f.shape[0]] = torch.as_tensor(f, dtype=dtype)
        enc_s, lens_s = model.encode_speech(batch, lens)
    if text_feats:
        n_max = max(f.shape[0] for f in text_feats)
        batch = torch.zeros(len(text_feats), n_max, text_feats[0].shape[1], dtype=dtype)
        lens = torch.tensor([f.shape[0] for f in text_feats])
        for i, f in enumerate(text_feats):
            batch[i, : f.shape[0]] = torch.as_tensor(f, dtype=dtype)
        enc_t, lens_t = model.encode_text(batch, lens)

    mixed = batch_concat(
        enc_s, lens_s, speech_targets, enc_t, lens_t, text_targets,
        speech_origins=speech_origins, speech_ids=speech_ids, text_ids=text_ids,
    )

    E: Optional[BiasEmbeddings] = None
    we_text = we_phone = 0.0
    if recipe.use_biasing:
        entries = [make_bias_entry(w, ctx.vocab, ctx.lexicon) for w in bias_words]
        E = model.biasing.encode_entries(entries)
        if recipe.word_encoder_kind == "learnable" and entries:
            we_text, we_phone = model.biasing.aux_losses(E)

    enc_b, pred_b = biased_streams(
        model, mixed.encoder_states, mixed.enc_lens, mixed.targets, mixed.u_lens, E
    )
    lattice = lattice_from_streams(model, enc_b, pred_b, mixed.enc_lens, mixed.u_lens, E)
    transducer = transducer_loss_batch(
        lattice, mixed.targets, mixed.enc_lens, mixed.u_lens
    ).sum()
    target_lists = [
        mixed.targets[i, : mixed.u_lens[i]].tolist() for i in range(len(mixed.origins))
    ]
    ctc, infeasible = ctc_loss_batch(
        model.output.ctc_log_probs(enc_b), mixed.enc_lens, target_lists
    )
    aed = aed_loss_batch(
        model, enc_b, mixed.enc_lens, mixed.targets, mixed.u_lens
    ).sum()
    ilmt = ilmt_loss_batch(model, pred_b, mixed.targets, mixed.u_lens).sum()

    parts = combined_loss(
        transducer=transducer,
        ctc=ctc,
        aed=aed,
        ilmt=ilmt,
        we_text=we_text,
        we_phone=we_phone,
        ilmt_weight=recipe.ilmt_weight,
        we_scale=recipe.we_scale,
        ctc_infeasible_count=infeasible,
    )
    total = parts.total
    if not torch.isfinite(total):
        raise RuntimeError(
            f"non-finite loss at step {groups.step_count}; utterances: {list(mixed.utt_ids)}"
        )
    objective = total
    if recipe.loss_normalization == "tokens":
        objective = total / max(1, int(mixed.u_lens.sum()))
    model.zero_grad(set_to_none=True)
    objective.backward()
    apply_update(model, groups)
    return parts.as_floats()


@dataclass
class FitResult:
    model: Transducer
    groups: OptimizerGroups
    log: List[dict]
    target_tokens_seen: int = 0


def build_model_for_recipe(
    recipe: TrainRecipe,
    model_config: ModelConfig,
    lexicon: PhonemeLexicon,
    rare2k: RareWordSet,
    init_model: Optional[Transducer] = None,
) -> Transducer:
    """Fresh or checkpoint-initialized model with the recipe's biasing module."""
    if recipe.mode in ("finetune-bias", "finetune-frozen") and init_model is None:
        raise ValueError(f"mode {recipe.mode!r} requires a pre-trained checkpoint")
    model = init_model if init_model is not None else Transducer(model_config, seed=recipe.seed)
    if recipe.use_biasing and model.biasing is None:
        surfaces = sorted(rare2k.words) if recipe.word_encoder_kind == "learnable" else None
        module = BiasingModule(
            model.config,
            recipe.variant,
            recipe.word_encoder_kind,
            num_phonemes=lexicon.num_phonemes,
            learnable_surfaces=surfaces,
            heads=recipe.bias_heads,
            seed=recipe.seed + 1,
        )
        module.to(next(model.parameters()).dtype)
        model.attach_biasing(module)
    return model


def fit(
    recipe: TrainRecipe,
    train_utterances: Sequence,
    vocab: SubwordVocab,
    lexicon: PhonemeLexicon,
    model_config: Optional[ModelConfig] = None,
    init_model: Optional[Transducer] = None,
    text_corpus: Optional[Sequence[str]] = None,
    log_path=None,
) -> FitResult:
    """Run the recipe over shuffled epochs of ``train_utterances``.

    ``scratch-ustr`` interleaves ``batch_size_text`` unspoken-text examples
    (drawn from ``text_corpus`` transcripts) with every speech batch and may
    reroute paired items through the text encoder. Fine-tune modes train the
    biasing module on top of ``init_model`` with group learning rates.

    Returns:
        FitResult with the trained model and the per-step loss log.
    """
    if recipe.mode == "scratch-ustr" and not text_corpus:
        raise ValueError("scratch-ustr requires a text corpus")
    if recipe.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(recipe.seed)
    rng = np.random.default_rng(recipe.seed)

    rare2k = build_rare_set(
        [u.transcript for u in train_utterances], recipe.rare_common_k
    )
    model = build_model_for_recipe(
        recipe, model_config, lexicon, rare2k,
        init_model=init_model,
    )
    groups = OptimizerGroups(
        lr_biasing=recipe.lr_biasing,
        lr_base=recipe.lr_base,
        freeze_base=recipe.mode == "finetune-frozen",
        optimizer=recipe.optimizer,
        momentum=recipe.momentum,
        warmup_steps=recipe.warmup_steps,
        clip_norm=recipe.clip_norm,
    )
    ctx = TrainContext(vocab=vocab, lexicon=lexicon, rare2k=rare2k, recipe=recipe)

    log: List[dict] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    tokens_seen = 0
    try:
        for epoch in range(recipe.epochs):
            order = rng.permutation(len(train_utterances))
            for start in range(0, len(order), recipe.batch_size_speech):
                chunk = [train_utterances[i] for i in order[start : start + recipe.batch_size_speech]]
                swap_p = recipe.paired_swap_p if recipe.mode == "scratch-ustr" else 0.0
                routed = paired_text_swap(
                    chunk, swap_p, rng, lexicon, vocab,
                    mask_p=recipe.text_mask_p,
                    repeat_range=recipe.text_repeat_range,
                    bpe_dropout=recipe.bpe_dropout,
                )
                if recipe.mode == "scratch-ustr" and recipe.batch_size_text > 0:
                    picks = rng.integers(0, len(text_corpus), size=recipe.batch_size_text)
                    for j, idx in enumerate(picks):
                        ex = make_text_features(
                            text_corpus[int(idx)], lexicon, vocab,
                            recipe.text_mask_p, recipe.text_repeat_range, rng,
                            bpe_dropout=recipe.bpe_dropout,
                        )
                        routed.append(
                            RoutedExample(
                                utt_id=f"text-{groups.step_count}-{j}",
                                origin="text",
                                transcript=" ".join(ex.transcript),
                                text=ex,
                            )
                        )
                bias_words: List[str] = []
                if recipe.use_biasing:
                    bias_words = sample_training_bias_list(
                        [r.transcript for r in routed],
                        rare2k,
                        recipe.max_extra_bias_words,
                        rng,
                    )
                parts = train_step(model, routed, bias_words, groups, ctx, rng)
                tokens_seen += sum(
                    len(vocab.encode_words([w.lower() for w in normalize_words(r.transcript)]))
                    for r in routed
                )
                record = {
                    "step": groups.step_count,
                    "epoch": epoch,
                    "losses": parts.to_dict(),
                    "lr_biasing": groups.lr_for("biasing"),
                    "lr_base": groups.lr_for("predictor"),
                    "bias_list_size": len(bias_words),
                }
                log.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
    finally:
        if log_file:
            log_file.close()
    return FitResult(model=model, groups=groups, log=log, target_tokens_seen=tokens_seen)


def epoch_mean_total(log: Sequence[dict], epoch: int) -> float:
    vals = [r["losses"]["total"] for r in log if r["epoch"] == epoch]
    return sum(vals) / len(vals) if vals else math.nan

"""Base transducer: audio frontend, text encoder, shared encoder with limited
lookahead, label predictor, jointer, and output heads.

Parameters are partitioned into named groups (``audio_encoder``,
``text_encoder``, ``shared_encoder``, ``predictor``, ``jointer``, ``output``,
``aed_decoder``, ``biasing``) so training can freeze or scale learning rates
per group. Group membership is the first component of the parameter name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch
from torch import Tensor, nn

PARAM_GROUPS = (
    "audio_encoder",
    "text_encoder",
    "shared_encoder",
    "predictor",
    "jointer",
    "output",
    "aed_decoder",
    "biasing",
)

# The frontend stacks two stride-2 convolutions with kernel 3 and symmetric
# padding: total stride 4, and output frame t sees input frames <= 4t + 3.
FRONTEND_STRIDE = 4
FRONTEND_LOOKAHEAD = 3


@dataclass
class ModelConfig:
    """Dimensions and structure of the transducer.

    Attributes:
        d_audio_in: Width of input audio feature vectors.
        d_text_in: Width of text feature vectors (phoneme inventory + mask).
        d_hidden: Hidden width used throughout encoder/predictor/jointer.
        d_word_embed: Bias-word embedding width.
        shared_layers: Number of shared encoder blocks.
        predictor_layers: Number of recurrent predictor layers.
        heads: Attention heads (must divide d_hidden).
        vocab_size: Output size including the blank id.
        lookahead_frames: Per-shared-layer attention lookahead, in encoder
            frames; an int applies to every layer.
        ffn_mult: Feed-forward expansion factor inside encoder blocks.
    """

    d_audio_in: int
    d_text_in: int
    d_hidden: int = 32
    d_word_embed: int = 16
    shared_layers: int = 2
    predictor_layers: int = 1
    heads: int = 2
    vocab_size: int = 64
    lookahead_frames: Union[int, Sequence[int]] = 1
    ffn_mult: int = 2

    def __post_init__(self):
        for name in (
            "d_audio_in",
            "d_text_in",
            "d_hidden",
            "d_word_embed",
            "shared_layers",
            "predictor_layers",
            "heads",
            "vocab_size",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_hidden % self.heads != 0:
            raise ValueError("heads must divide d_hidden")
        las = self.lookahead_per_layer()
        if len(las) != self.shared_layers:
            raise ValueError("lookahead_frames must give one value per shared layer")
        if any(la < 0 for la in las):
            raise ValueError("lookahead_frames must be >= 0")

    def lookahead_per_layer(self) -> Tuple[int, ...]:
        if isinstance(self.lookahead_frames, int):
            return (self.lookahead_frames,) * self.shared_layers
        return tuple(self.lookahead_frames)

    def total_lookahead_input_frames(self) -> int:
        """Input frames beyond 4t that may influence encoder output frame t."""
        return FRONTEND_LOOKAHEAD + FRONTEND_STRIDE * sum(self.lookahead_per_layer())

    def to_dict(self) -> dict:
        return {
            "d_audio_in": self.d_audio_in,
            "d_text_in": self.d_text_in,
            "d_hidden": self.d_hidden,
            "d_word_embed": self.d_word_embed,
            "shared_layers": self.shared_layers,
            "predictor_layers": self.predictor_layers,
            "heads": self.heads,
            "vocab_size": self.vocab_size,
            "lookahead_frames": list(self.lookahead_per_layer()),
            "ffn_mult": self.ffn_mult,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("lookahead_frames"), list):
            d["lookahead_frames"] = tuple(d["lookahead_frames"])
        return cls(**d)


def full_scale_preset(d_audio_in: int = 80, d_text_in: int = 70) -> ModelConfig:
    """Production-sized configuration: 12 shared layers, one frame of
    lookahead in the first 7, two predictor layers, 4048 output units.
    Desk-scale tests never instantiate it."""
    return ModelConfig(
        d_audio_in=d_audio_in,
        d_text_in=d_text_in,
        d_hidden=512,
        d_word_embed=256,
        shared_layers=12,
        predictor_layers=2,
        heads=8,
        vocab_size=4048,
        lookahead_frames=(1,) * 7 + (0,) * 5,
        ffn_mult=4,
    )


class InputTooShortError(ValueError):
    """Audio input shorter than the frontend's minimum length."""


def sinusoidal_positions(length: int, width: int, dtype, device) -> Tensor:
    """Standard sinusoidal position encodings, shape [length, width]."""
    pos = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    idx = torch.arange(0, width, 2, dtype=dtype, device=device)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype, device=device), idx / width)
    pe = torch.zeros(length, width, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : width // 2])
    return pe


class MultiHeadAttention(nn.Module):
    """Multi-head dot-product attention with an optional boolean mask.

    Mask entries that are True mark allowed (query, key) pairs.
    """

    def __init__(self, query_dim: int, key_dim: int, attn_dim: int, heads: int):
        super().__init__()
        if attn_dim % heads != 0:
            raise ValueError("heads must divide attn_dim")
        self.heads = heads
        self.head_dim = attn_dim // heads
        self.wq = nn.Linear(query_dim, attn_dim)
        self.wk = nn.Linear(key_dim, attn_dim)
        self.wv = nn.Linear(key_dim, attn_dim)
        self.wo = nn.Linear(attn_dim, attn_dim)

    def forward(
        self,
        query: Tensor,
        keys: Tensor,
        values: Optional[Tensor] = None,
        mask: Optional[Tensor] = None,
    ) -> Tensor:
        """Attend from [B, Lq, Dq] queries over [B, Lk, Dk] keys.

        ``mask`` broadcasts to [B, Lq, Lk]; every query must keep at least
        one allowed key.
        """
        if values is None:
            values = keys
        B, Lq, _ = query.shape
        Lk = keys.shape[1]
        q = self.wq(query).view(B, Lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.wk(keys).view(B, Lk, self.heads, self.head_dim).transpose(1, 2)
        v = self.wv(values).view(B, Lk, self.heads, self.head_dim).transpose(1, 2)
        scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = torch.matmul(attn, v).transpose(1, 2).reshape(B, Lq, -1)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, width: int, mult: int):
        super().__init__()
        self.fc1 = nn.Linear(width, mult * width)
        self.fc2 = nn.Linear(mult * width, width)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


def lookahead_mask(length: int, lookahead: Optional[int], device) -> Tensor:
    """[length, length] mask where position i may see j <= i + lookahead.

    ``lookahead=None`` allows full context.
    """
    if lookahead is None:
        return torch.ones(length, length, dtype=torch.bool, device=device)
    idx = torch.arange(length, device=device)
    return idx.unsqueeze(1) + lookahead >= idx.unsqueeze(0)


def length_mask(lengths: Tensor, max_len: int) -> Tensor:
    """[B, max_len] validity mask from per-item lengths."""
    idx = torch.arange(max_len, device=lengths.device)
    return idx.unsqueeze(0) < lengths.unsqueeze(1)


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block with limited lookahead."""

    def __init__(self, width: int, heads: int, lookahead: Optional[int], ffn_mult: int):
        super().__init__()
        self.lookahead = lookahead
        self.ln_attn = nn.LayerNorm(width)
        self.attn = MultiHeadAttention(width, width, width, heads)
        self.ln_ffn = nn.LayerNorm(width)
        self.ffn = FeedForward(width, ffn_mult)

    def forward(self, x: Tensor, valid: Tensor) -> Tensor:
        L = x.shape[1]
        mask = lookahead_mask(L, self.lookahead, x.device).unsqueeze(0) & valid.unsqueeze(1)
        h = self.ln_attn(x)
        x = x + self.attn(h, h, h, mask=mask)
        x = x + self.ffn(self.ln_ffn(x))
        return x


class SharedEncoder(nn.Module):
    """Stack of limited-lookahead blocks applied to speech and text alike."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            EncoderBlock(config.d_hidden, config.heads, la, config.ffn_mult)
            for la in config.lookahead_per_layer()
        )

    def forward(self, x: Tensor, lengths: Tensor) -> Tensor:
        valid = length_mask(lengths, x.shape[1])
        for block in self.blocks:
            x = block(x, valid)
        return x * valid.unsqueeze(-1).to(x.dtype)


class AudioFrontend(nn.Module):
    """Two stride-2 1-D convolutions with ReLU; total stride 4.

    ``norm`` rescales frames to unit variance before position encodings are
    added, so content is not drowned out; it is applied by the caller, not
    by ``forward``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        width = config.d_hidden
        self.conv1 = nn.Conv1d(config.d_audio_in, width, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(width, width, kernel_size=3, stride=2, padding=1)
        self.norm = nn.LayerNorm(width)

    @staticmethod
    def output_length(t: int) -> int:
        return math.ceil(math.ceil(t / 2) / 2)

    def forward(self, features: Tensor, lengths: Tensor) -> Tuple[Tensor, Tensor]:
        """Subsample [B, T, D1] features to [B, T', H] with T' = ceil(ceil(T/2)/2).

        Raises:
            InputTooShortError: If any item has fewer than 4 frames.
        """
        if int(lengths.min()) < 4:
            raise InputTooShortError(
                f"audio input needs >= 4 frames, got {int(lengths.min())}"
            )
        x = features * length_mask(lengths, features.shape[1]).unsqueeze(-1).to(features.dtype)
        x = x.transpose(1, 2)
        x = torch.relu(self.conv1(x))
        mid = torch.div(lengths - 1, 2, rounding_mode="floor") + 1
        x = x * length_mask(mid, x.shape[2]).unsqueeze(1).to(x.dtype)
        x = torch.relu(self.conv2(x))
        out_lengths = torch.div(mid - 1, 2, rounding_mode="floor") + 1
        x = x.transpose(1, 2)
        x = x * length_mask(out_lengths, x.shape[1]).unsqueeze(-1).to(x.dtype)
        return x, out_lengths


class TextEncoder(nn.Module):
    """Projection of text feature vectors plus one full-context block."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(config.d_text_in, config.d_hidden)
        self.norm = nn.LayerNorm(config.d_hidden)
        self.block = EncoderBlock(config.d_hidden, config.heads, None, config.ffn_mult)

    def forward(self, features: Tensor, lengths: Tensor) -> Tensor:
        x = self.norm(self.proj(features))
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype, x.device)
        valid = length_mask(lengths, x.shape[1])
        x = self.block(x, valid)
        return x * valid.unsqueeze(-1).to(x.dtype)


@dataclass
class PredictorState:
    """Recurrent predictor state plus the last token consumed."""

    hidden: Tensor
    cell: Tensor
    last_token: Optional[int] = None


class Predictor(nn.Module):
    """Label predictor: token embedding followed by unidirectional LSTM.

    The blank id doubles as the start-of-sequence sentinel; the initial
    state corresponds to the empty prefix.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.vocab_size = config.vocab_size
        self.embedding = nn.Embedding(config.vocab_size, config.d_hidden)
        self.lstm = nn.LSTM(
            config.d_hidden,
            config.d_hidden,
            num_layers=config.predictor_layers,
            batch_first=True,
        )

    def initial_state(self, batch: int = 1) -> PredictorState:
        p = self.embedding.weight
        shape = (self.lstm.num_layers, batch, self.lstm.hidden_size)
        zeros = torch.zeros(shape, dtype=p.dtype, device=p.device)
        return PredictorState(hidden=zeros, cell=zeros.clone(), last_token=None)

    def step(self, state: PredictorState, token: int) -> Tuple[Tensor, Tensor, PredictorState]:
        """Advance one step.

        Args:
            state: Current recurrent state.
            token: Previously emitted token id, or the blank sentinel.

        Returns:
            (embedding output [H], predictor output [H], new state).
        """
        if not 0 <= token < self.vocab_size:
            raise ValueError(f"token id {token} outside vocabulary of {self.vocab_size}")
        ids = torch.tensor([[token]], device=self.embedding.weight.device)
        emb = self.embedding(ids)
        out, (h, c) = self.lstm(emb, (state.hidden, state.cell))
        return emb[0, 0], out[0, 0], PredictorState(hidden=h, cell=c, last_token=token)

    def unroll(self, prefix_ids: Tensor) -> Tuple[Tensor, Tensor]:
        """Run the whole [B, U+1] prefix (leading sentinel included).

        Returns:
            (embedding outputs [B, U+1, H], predictor outputs [B, U+1, H]).
        """
        if prefix_ids.numel() and int(prefix_ids.max()) >= self.vocab_size:
            raise ValueError("token id outside vocabulary")
        emb = self.embedding(prefix_ids)
        out, _ = self.lstm(emb)
        return emb, out


class Jointer(nn.Module):
    """Combine encoder and predictor vectors: sum of projections, then tanh."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.enc_proj = nn.Linear(config.d_hidden, config.d_hidden)
        self.pred_proj = nn.Linear(config.d_hidden, config.d_hidden)

    def pre_activation(self, h_enc: Tensor, h_pred: Tensor) -> Tensor:
        return self.enc_proj(h_enc) + self.pred_proj(h_pred)

    def forward(self, h_enc: Tensor, h_pred: Tensor) -> Tensor:
        return torch.tanh(self.pre_activation(h_enc, h_pred))


class OutputHead(nn.Module):
    """Final projections: transducer output distribution and the CTC head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.fc = nn.Linear(config.d_hidden, config.vocab_size)
        self.ctc_fc = nn.Linear(config.d_hidden, config.vocab_size)

    def log_probs(self, h_joint: Tensor) -> Tensor:
        return torch.log_softmax(self.fc(h_joint), dim=-1)

    def ctc_log_probs(self, h_enc: Tensor) -> Tensor:
        return torch.log_softmax(self.ctc_fc(h_enc), dim=-1)


class AedDecoder(nn.Module):
    """Single cross-attention decoder used as an auxiliary training head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.embedding = nn.Embedding(config.vocab_size, config.d_hidden)
        self.ln_q = nn.LayerNorm(config.d_hidden)
        self.cross = MultiHeadAttention(
            config.d_hidden, config.d_hidden, config.d_hidden, config.heads
        )
        self.fc = nn.Linear(config.d_hidden, config.vocab_size)

    def logits(self, enc: Tensor, enc_lengths: Tensor, tgt_in: Tensor) -> Tensor:
        """Teacher-forced logits [B, U+1, V] over shifted targets."""
        q = self.embedding(tgt_in)
        mask = length_mask(enc_lengths, enc.shape[1]).unsqueeze(1)
        h = q + self.cross(self.ln_q(q), enc, enc, mask=mask)
        return self.fc(h)


def seeded_init_(module: nn.Module, generator: torch.Generator) -> None:
    """Initialize every parameter to uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).

    LayerNorm weights stay at one and its biases at zero. Deterministic for
    a fixed generator state and module structure.
    """
    for m in module.modules():
        if isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)
            continue
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            fan_in = m.weight.shape[1:].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, nn.Embedding):
            bound = 1.0 / math.sqrt(m.embedding_dim)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, nn.LSTM):
            bound = 1.0 / math.sqrt(m.hidden_size)
            with torch.no_grad():
                for name, p in sorted(m.named_parameters(recurse=False)):
                    p.uniform_(-bound, bound, generator=generator)


class Transducer(nn.Module):
    """The full base model; a biasing module may be attached afterwards."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.audio_encoder = AudioFrontend(config)
        self.text_encoder = TextEncoder(config)
        self.shared_encoder = SharedEncoder(config)
        self.predictor = Predictor(config)
        self.jointer = Jointer(config)
        self.output = OutputHead(config)
        self.aed_decoder = AedDecoder(config)
        self.biasing: Optional[nn.Module] = None
        gen = torch.Generator().manual_seed(seed)
        seeded_init_(self, gen)

    def attach_biasing(self, biasing: nn.Module) -> None:
        self.biasing = biasing

    def encode_speech(self, features: Tensor, lengths: Tensor) -> Tuple[Tensor, Tensor]:
        """Audio features [B, T, D1] -> encoder states [B, T', H] and lengths."""
        x, out_lengths = self.audio_encoder(features, lengths)
        x = self.audio_encoder.norm(x)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype, x.device)
        x = x * length_mask(out_lengths, x.shape[1]).unsqueeze(-1).to(x.dtype)
        return self.shared_encoder(x, out_lengths), out_lengths

    def encode_text(self, features: Tensor, lengths: Tensor) -> Tuple[Tensor, Tensor]:
        """Text features [B, N, D2] -> encoder states [B, N, H]; length kept."""
        x = self.text_encoder(features, lengths)
        return self.shared_encoder(x, lengths), lengths

    def joint_log_probs(self, h_enc: Tensor, h_pred: Tensor) -> Tensor:
        """Output distribution for already-combined single vectors."""
        return self.output.log_probs(self.jointer(h_enc, h_pred))

    def parameter_groups(self) -> dict:
        """Named parameters keyed by group; all group keys always present."""
        groups = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            head = name.split(".", 1)[0]
            if head not in groups:
                raise RuntimeError(f"parameter {name} outside the known groups")
            groups[head].append((name, p))
        return groups

    def group_of(self, param_name: str) -> str:
        return param_name.split(".", 1)[0]

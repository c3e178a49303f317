"""Biasing module: word encoders that embed bias entries and attention
layers that inject bias vectors at a selectable query site.

Supported query sites (variants):

* ``predictor``: query is the concatenation of the predictor's embedding
  output and final output at each label step.
* ``encoder``: query is the encoder output at each frame.
* ``enc-pre``: both of the above with separately parameterized layers.
* ``jointer``: query is the jointer hidden state at each (frame, step) pair.

Every biasing layer ends in a projection initialized to zero, so a freshly
attached module leaves the base model's outputs untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn

from .model import ModelConfig, MultiHeadAttention, Transducer, length_mask, seeded_init_
from .phonemes import PhonemeLexicon
from .subwords import SubwordVocab
from .textnorm import normalize_words

VARIANTS = ("predictor", "encoder", "enc-pre", "jointer")
WORD_ENCODER_KINDS = ("textual", "tex-pho", "learnable")


@dataclass(frozen=True)
class BiasEntry:
    """A bias word (or word sequence) with its token views."""

    surface: str
    subword_ids: Tuple[int, ...]
    phoneme_ids: Tuple[int, ...]


def make_bias_entry(text: str, vocab: SubwordVocab, lexicon: PhonemeLexicon) -> BiasEntry:
    """Build an entry from raw text: normalized surface, deterministic
    subword encoding, per-word phonemes concatenated."""
    words = normalize_words(text)
    if not words:
        raise ValueError(f"bias entry {text!r} is empty after normalization")
    surface = " ".join(words)
    subword_ids = tuple(vocab.encode_words([w.lower() for w in words], 0.0))
    phoneme_ids = tuple(lexicon.lookup_words(words))
    return BiasEntry(surface=surface, subword_ids=subword_ids, phoneme_ids=phoneme_ids)


def load_bias_list(path, vocab: SubwordVocab, lexicon: PhonemeLexicon) -> List[BiasEntry]:
    """Read a bias-list file: one entry per line, optionally
    ``surface<TAB>PH1 PH2 ...`` to override the lexicon's phonemes."""
    entries: List[BiasEntry] = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" in line:
                text, phones = line.split("\t", 1)
                base = make_bias_entry(text, vocab, lexicon)
                entries.append(
                    BiasEntry(
                        surface=base.surface,
                        subword_ids=base.subword_ids,
                        phoneme_ids=tuple(lexicon.symbols_to_ids(phones.split())),
                    )
                )
            else:
                entries.append(make_bias_entry(line, vocab, lexicon))
    return entries


@dataclass
class BiasEmbeddings:
    """(K+1) x M embedding matrix; row 0 is the no-bias row."""

    matrix: Tensor
    entries: Tuple[BiasEntry, ...]

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.entries) + 1:
            raise ValueError("row count must be entry count + 1")

    @property
    def num_entries(self) -> int:
        return len(self.entries)


def _check_distinct(entries: Sequence[BiasEntry]) -> None:
    seen = set()
    for e in entries:
        if e.surface in seen:
            raise ValueError(f"duplicate bias surface {e.surface!r}")
        seen.add(e.surface)


def _run_final_state(
    lstm: nn.LSTM, embedding: nn.Embedding, id_seqs: Sequence[Sequence[int]]
) -> Tensor:
    """Final LSTM hidden state for each id sequence (all non-empty)."""
    device = embedding.weight.device
    lens = [len(s) for s in id_seqs]
    max_len = max(lens)
    ids = torch.zeros(len(id_seqs), max_len, dtype=torch.long, device=device)
    for i, seq in enumerate(id_seqs):
        ids[i, : len(seq)] = torch.tensor(list(seq), device=device)
    out, _ = lstm(embedding(ids))
    idx = torch.tensor(lens, device=device) - 1
    return out[torch.arange(len(id_seqs), device=device), idx]


class TextualWordEncoder(nn.Module):
    """Recurrent encoder over subword tokens; final state is the embedding.

    The empty entry (row 0) encodes to the recurrence's initial state, i.e.
    the zero vector.
    """

    kind = "textual"

    def __init__(self, config: ModelConfig):
        super().__init__()
        m = config.d_word_embed
        self.embedding = nn.Embedding(config.vocab_size, m)
        self.lstm = nn.LSTM(m, m, batch_first=True)

    def forward(self, entries: Sequence[BiasEntry]) -> Tensor:
        w = self.embedding.weight
        rows = [torch.zeros(1, self.lstm.hidden_size, dtype=w.dtype, device=w.device)]
        if entries:
            rows.append(_run_final_state(self.lstm, self.embedding, [e.subword_ids for e in entries]))
        return torch.cat(rows, dim=0)


class TexPhoWordEncoder(nn.Module):
    """Textual and phoneme recurrences, concatenated and projected back to M."""

    kind = "tex-pho"

    def __init__(self, config: ModelConfig, num_phonemes: int):
        super().__init__()
        m = config.d_word_embed
        self.text_embedding = nn.Embedding(config.vocab_size, m)
        self.text_lstm = nn.LSTM(m, m, batch_first=True)
        self.phone_embedding = nn.Embedding(num_phonemes, m)
        self.phone_lstm = nn.LSTM(m, m, batch_first=True)
        self.fc = nn.Linear(2 * m, m)

    def forward(self, entries: Sequence[BiasEntry]) -> Tensor:
        m = self.text_lstm.hidden_size
        w = self.fc.weight
        text = [torch.zeros(1, m, dtype=w.dtype, device=w.device)]
        phone = [torch.zeros(1, m, dtype=w.dtype, device=w.device)]
        if entries:
            text.append(_run_final_state(self.text_lstm, self.text_embedding, [e.subword_ids for e in entries]))
            phone.append(_run_final_state(self.phone_lstm, self.phone_embedding, [e.phoneme_ids for e in entries]))
        return self.fc(torch.cat([torch.cat(text, 0), torch.cat(phone, 0)], dim=1))


class _AuxDecoder(nn.Module):
    """Tiny attention decoder reconstructing a token sequence from one
    word embedding; used only for the learnable encoder's training losses."""

    def __init__(self, m: int, input_vocab: int, output_vocab: int, start_id: int):
        super().__init__()
        self.start_id = start_id
        self.embedding = nn.Embedding(input_vocab, m)
        self.ln_q = nn.LayerNorm(m)
        self.cross = MultiHeadAttention(m, m, m, heads=1)
        self.fc = nn.Linear(m, output_vocab)

    def ce(self, word_embedding: Tensor, target: Sequence[int]) -> Tensor:
        if not target:
            raise ValueError("auxiliary decoder target must be non-empty")
        device = word_embedding.device
        tgt_in = torch.tensor([self.start_id] + list(target[:-1]), device=device)
        q = self.embedding(tgt_in).unsqueeze(0)
        memory = word_embedding.view(1, 1, -1)
        h = q + self.cross(self.ln_q(q), memory)
        logp = torch.log_softmax(self.fc(h)[0], dim=-1)
        picked = logp[torch.arange(len(target), device=device), torch.tensor(list(target), device=device)]
        return -picked.sum()


class LearnableWordEncoder(nn.Module):
    """Free embedding per known surface; two auxiliary decoders reconstruct
    the subword and phoneme sequences during training and are dropped at
    inference. Row 0 is a dedicated learned no-bias embedding."""

    kind = "learnable"

    def __init__(self, config: ModelConfig, num_phonemes: int, surfaces: Sequence[str]):
        super().__init__()
        m = config.d_word_embed
        self.index = {s: i + 1 for i, s in enumerate(dict.fromkeys(surfaces))}
        self.table = nn.Embedding(len(self.index) + 1, m)
        self.text_decoder = _AuxDecoder(m, config.vocab_size, config.vocab_size, start_id=0)
        self.phone_decoder = _AuxDecoder(m, num_phonemes + 1, num_phonemes, start_id=num_phonemes)

    def forward(self, entries: Sequence[BiasEntry]) -> Tensor:
        device = self.table.weight.device
        ids = [0]
        for e in entries:
            if e.surface not in self.index:
                raise KeyError(f"surface {e.surface!r} unknown to the learnable encoder")
            ids.append(self.index[e.surface])
        return self.table(torch.tensor(ids, device=device))

    def aux_losses(self, matrix: Tensor, entries: Sequence[BiasEntry]) -> Tuple[Tensor, Tensor]:
        text = matrix.new_zeros(())
        phone = matrix.new_zeros(())
        for row, entry in zip(matrix[1:], entries):
            text = text + self.text_decoder.ce(row, entry.subword_ids)
            phone = phone + self.phone_decoder.ce(row, entry.phoneme_ids)
        return text, phone


class BiasingLayer(nn.Module):
    """Attention over bias embeddings plus a zero-initialized projection.

    The returned bias vector is meant to be added residually by the caller;
    ``queries_seen`` counts query vectors for complexity assertions.
    """

    def __init__(self, query_dim: int, embed_dim: int, out_dim: int, heads: int):
        super().__init__()
        self.mha = MultiHeadAttention(query_dim, embed_dim, embed_dim, heads)
        self.final = nn.Linear(embed_dim, out_dim)
        self.queries_seen = 0

    def zero_final_(self) -> None:
        with torch.no_grad():
            self.final.weight.zero_()
            self.final.bias.zero_()

    def forward(self, queries: Tensor, embeddings: Tensor) -> Tensor:
        """Bias vectors for a flat [n, query_dim] batch of queries."""
        self.queries_seen += queries.shape[0]
        out = self.mha(queries.unsqueeze(0), embeddings.unsqueeze(0))
        return self.final(out[0])

    def attention_weights(self, queries: Tensor, embeddings: Tensor) -> Tensor:
        """Softmax attention of the first head, for inspection in tests."""
        q = self.mha.wq(queries)[:, : self.mha.head_dim]
        k = self.mha.wk(embeddings)[:, : self.mha.head_dim]
        scores = q @ k.T / (self.mha.head_dim ** 0.5)
        return torch.softmax(scores, dim=-1)


class BiasingModule(nn.Module):
    """Word encoder plus the biasing layers demanded by the chosen variant."""

    def __init__(
        self,
        config: ModelConfig,
        variant: str,
        word_encoder_kind: str = "textual",
        num_phonemes: int = 0,
        learnable_surfaces: Optional[Sequence[str]] = None,
        heads: int = 4,
        seed: int = 0,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; pick one of {VARIANTS}")
        if word_encoder_kind not in WORD_ENCODER_KINDS:
            raise ValueError(
                f"unknown word encoder {word_encoder_kind!r}; pick one of {WORD_ENCODER_KINDS}"
            )
        self.variant = variant
        h = config.d_hidden
        m = config.d_word_embed
        if m % heads != 0:
            raise ValueError("heads must divide d_word_embed")
        if word_encoder_kind == "textual":
            self.word_encoder: nn.Module = TextualWordEncoder(config)
        elif word_encoder_kind == "tex-pho":
            if num_phonemes < 1:
                raise ValueError("tex-pho encoder needs the phoneme inventory size")
            self.word_encoder = TexPhoWordEncoder(config, num_phonemes)
        else:
            if num_phonemes < 1:
                raise ValueError("learnable encoder needs the phoneme inventory size")
            self.word_encoder = LearnableWordEncoder(
                config, num_phonemes, learnable_surfaces or []
            )
        layers: Dict[str, BiasingLayer] = {}
        if variant in ("encoder", "enc-pre"):
            layers["encoder"] = BiasingLayer(h, m, h, heads)
        if variant in ("predictor", "enc-pre"):
            layers["predictor"] = BiasingLayer(2 * h, m, h, heads)
        if variant == "jointer":
            layers["jointer"] = BiasingLayer(h, m, h, heads)
        self.layers = nn.ModuleDict(layers)
        gen = torch.Generator().manual_seed(seed)
        seeded_init_(self, gen)
        for layer in self.layers.values():
            layer.zero_final_()

    # ------------------------------------------------------------- encoding

    def encode_entries(self, entries: Sequence[BiasEntry]) -> BiasEmbeddings:
        """Embed a bias list; row 0 is always the no-bias row."""
        _check_distinct(entries)
        return BiasEmbeddings(matrix=self.word_encoder(entries), entries=tuple(entries))

    def aux_losses(self, embeddings: BiasEmbeddings) -> Tuple[Tensor, Tensor]:
        """Reconstruction losses of the learnable encoder (unscaled sums)."""
        if not isinstance(self.word_encoder, LearnableWordEncoder):
            raise ValueError("auxiliary losses exist only for the learnable encoder")
        return self.word_encoder.aux_losses(embeddings.matrix, embeddings.entries)

    # ------------------------------------------------------------- counters

    def reset_counters(self) -> None:
        for layer in self.layers.values():
            layer.queries_seen = 0

    def counters(self) -> Dict[str, int]:
        return {site: layer.queries_seen for site, layer in self.layers.items()}

    def total_queries(self) -> int:
        return sum(self.counters().values())

    # ------------------------------------------------------------- biasing

    def _bias_flat(self, site: str, queries: Tensor, E: BiasEmbeddings) -> Tensor:
        layer = self.layers[site]
        flat = queries.reshape(-1, queries.shape[-1])
        return layer(flat, E.matrix).reshape(*queries.shape[:-1], -1)

    def bias_encoder(self, enc: Tensor, E: BiasEmbeddings, valid: Optional[Tensor] = None) -> Tensor:
        """Add bias vectors to encoder states (any leading shape).

        ``valid`` masks padded frames out of both the result and the
        query counter.
        """
        if "encoder" not in self.layers:
            raise ValueError(f"variant {self.variant!r} has no encoder-side layer")
        if valid is None:
            return enc + self._bias_flat("encoder", enc, E)
        out = enc + self._bias_flat("encoder", enc, E)
        self.layers["encoder"].queries_seen -= int((~valid).sum())
        return out * valid.unsqueeze(-1).to(out.dtype)

    def bias_predictor(self, emb: Tensor, pred: Tensor, E: BiasEmbeddings, valid: Optional[Tensor] = None) -> Tensor:
        """Add bias vectors to predictor outputs; the query concatenates the
        embedding output with the predictor output."""
        if "predictor" not in self.layers:
            raise ValueError(f"variant {self.variant!r} has no predictor-side layer")
        query = torch.cat([emb, pred], dim=-1)
        out = pred + self._bias_flat("predictor", query, E)
        if valid is not None:
            self.layers["predictor"].queries_seen -= int((~valid).sum())
        return out

    def bias_joint(self, joint: Tensor, E: BiasEmbeddings, valid: Optional[Tensor] = None) -> Tensor:
        """Add bias vectors to jointer hidden states (any leading shape)."""
        if "jointer" not in self.layers:
            raise ValueError(f"variant {self.variant!r} has no jointer-side layer")
        out = joint + self._bias_flat("jointer", joint, E)
        if valid is not None:
            self.layers["jointer"].queries_seen -= int((~valid).sum())
        return out


def biased_streams(
    model: Transducer,
    enc: Tensor,
    enc_lens: Tensor,
    targets: Tensor,
    u_lens: Tensor,
    E: Optional[BiasEmbeddings] = None,
    blank: int = 0,
) -> Tuple[Tensor, Tensor]:
    """Teacher-forced encoder and predictor streams with encoder/predictor
    site biasing applied (jointer-site biasing happens in the lattice).

    Returns:
        (encoder states [B, L, H], predictor outputs [B, U+1, H]).
    """
    B, L, _ = enc.shape
    device = enc.device
    sos = torch.full((B, 1), blank, dtype=torch.long, device=device)
    prefix = torch.cat([sos, targets.to(device)], dim=1)
    emb, pred = model.predictor.unroll(prefix)
    if E is not None:
        biasing = model.biasing
        if biasing is None:
            raise ValueError("model has no biasing module attached")
        if biasing.variant in ("encoder", "enc-pre"):
            enc = biasing.bias_encoder(enc, E, valid=length_mask(enc_lens, L))
        if biasing.variant in ("predictor", "enc-pre"):
            pred = biasing.bias_predictor(
                emb, pred, E, valid=length_mask(u_lens + 1, pred.shape[1])
            )
    return enc, pred


def lattice_from_streams(
    model: Transducer,
    enc: Tensor,
    pred: Tensor,
    enc_lens: Tensor,
    u_lens: Tensor,
    E: Optional[BiasEmbeddings] = None,
) -> Tensor:
    """[B, L, U+1, W] output lattice from prepared streams, with jointer-site
    biasing applied when configured."""
    joint = model.jointer(enc.unsqueeze(2), pred.unsqueeze(1))
    if E is not None and model.biasing is not None and model.biasing.variant == "jointer":
        valid = length_mask(enc_lens, enc.shape[1]).unsqueeze(2) & length_mask(
            u_lens + 1, pred.shape[1]
        ).unsqueeze(1)
        joint = model.biasing.bias_joint(joint, E, valid=valid)
    return model.output.log_probs(joint)


def lattice_log_probs(
    model: Transducer,
    enc: Tensor,
    enc_lens: Tensor,
    targets: Tensor,
    u_lens: Tensor,
    E: Optional[BiasEmbeddings] = None,
    blank: int = 0,
) -> Tensor:
    """Full [B, L, U+1, W] output lattice, applying the attached biasing
    module at its query site when ``E`` is given.

    Per item, the biasing layers see exactly ``T'`` encoder queries and
    ``U+1`` predictor queries (``T' x (U+1)`` for the jointer variant).
    """
    enc_b, pred_b = biased_streams(model, enc, enc_lens, targets, u_lens, E, blank)
    return lattice_from_streams(model, enc_b, pred_b, enc_lens, u_lens, E)

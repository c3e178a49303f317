"""Checkpoint container: a self-describing npz archive holding every named
parameter as a row-major little-endian float32 payload, plus the model
configuration, biasing structure, and vocabulary/lexicon content hashes.
"""

from __future__ import annotations

import json
from typing import Optional, Tuple

import numpy as np
import torch

from .biasing import BiasingModule
from .model import ModelConfig, Transducer

FORMAT_VERSION = 1


def save_model(path, model: Transducer, vocab_hash: str, lexicon_hash: str, extra: Optional[dict] = None) -> None:
    """Write the model (biasing module included when attached) to ``path``."""
    arrays = {}
    manifest = []
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f4")
        arrays[f"param/{name}"] = arr
        manifest.append({"name": name, "shape": list(arr.shape), "group": model.group_of(name)})
    biasing_meta = None
    if model.biasing is not None:
        b: BiasingModule = model.biasing
        biasing_meta = {
            "variant": b.variant,
            "word_encoder_kind": b.word_encoder.kind,
            "heads": next(iter(b.layers.values())).mha.heads,
            "num_phonemes": _biasing_num_phonemes(b),
            "learnable_surfaces": sorted(b.word_encoder.index)
            if b.word_encoder.kind == "learnable"
            else None,
        }
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "biasing": biasing_meta,
        "vocab_hash": vocab_hash,
        "lexicon_hash": lexicon_hash,
        "extra": extra or {},
        "manifest": manifest,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def _biasing_num_phonemes(b: BiasingModule) -> int:
    kind = b.word_encoder.kind
    if kind == "tex-pho":
        return b.word_encoder.phone_embedding.num_embeddings
    if kind == "learnable":
        return b.word_encoder.phone_decoder.embedding.num_embeddings - 1
    return 0


def read_meta(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["__meta__"]).decode("utf-8"))


def load_model(
    path,
    expected_vocab_hash: Optional[str] = None,
    expected_lexicon_hash: Optional[str] = None,
) -> Tuple[Transducer, dict]:
    """Rebuild the model from a checkpoint.

    Hash arguments, when given, must match the hashes stored at save time;
    a mismatch means the checkpoint was trained against different vocabulary
    or lexicon files and is refused.
    """
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        if expected_vocab_hash is not None and meta["vocab_hash"] != expected_vocab_hash:
            raise ValueError("checkpoint was built with a different subword vocabulary")
        if expected_lexicon_hash is not None and meta["lexicon_hash"] != expected_lexicon_hash:
            raise ValueError("checkpoint was built with a different lexicon")
        config = ModelConfig.from_dict(meta["model_config"])
        model = Transducer(config, seed=0)
        if meta["biasing"] is not None:
            bm = meta["biasing"]
            module = BiasingModule(
                config,
                bm["variant"],
                bm["word_encoder_kind"],
                num_phonemes=bm["num_phonemes"],
                learnable_surfaces=bm["learnable_surfaces"],
                heads=bm["heads"],
            )
            model.attach_biasing(module)
        state = {}
        for item in meta["manifest"]:
            arr = z[f"param/{item['name']}"]
            state[item["name"]] = torch.from_numpy(arr.copy())
    own = dict(model.named_parameters())
    if set(own) != set(state):
        raise ValueError("checkpoint parameter names do not match the rebuilt model")
    with torch.no_grad():
        for name, p in own.items():
            if tuple(p.shape) != tuple(state[name].shape):
                raise ValueError(f"shape mismatch for {name}")
            p.copy_(state[name].to(p.dtype))
    return model, meta


def checksum(model: Transducer, groups: Optional[Tuple[str, ...]] = None) -> str:
    """Hex digest over the float32 little-endian parameter payloads."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if groups is not None and model.group_of(name) not in groups:
            continue
        h.update(name.encode("utf-8"))
        h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()

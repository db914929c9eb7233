"""Shared encoder plus the three decoders, wired to batches of worlds."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as tn
from .data import (
    ANSWERS, FEATURE_DIM, VOCAB, World, collate_grounding,
    collate_images, collate_sentences,
)
from .decoders import DecoderParams, decode_icr, decode_vg, decode_vqa
from .encoder import EncoderParams, encode, encode_regions, encode_sentence
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    depth: int = 5
    k: int = 4
    taps: dict = field(default_factory=lambda: {"ICR": 3, "VQA": 5, "VG": 2})
    d_in: int = FEATURE_DIM
    vocab_size: int = len(VOCAB)
    num_answers: int = len(ANSWERS)
    d_embed: int | None = None
    p_lstm: float = 0.1
    p_fc: float = 0.3

    def __post_init__(self):
        for task, tap in self.taps.items():
            if not 1 <= tap <= self.depth:
                raise ValueError(f"tap for {task} is {tap}, outside 1..{self.depth}")

    def to_dict(self) -> dict:
        return asdict(self)


class MultiTaskModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = tn.stream(seed, "init")
        self.encoder = EncoderParams.init(rng, config.vocab_size, config.d, config.depth, config.d_in,
                                          config.d_embed)
        self.decoders = DecoderParams.init(rng, config.d, config.k, config.num_answers)

    # ---------------------------------------------------------------- parameters

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.encoder.named_parameters())
        out.update(self.decoders.named_parameters())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state lacks parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    def checksum(self) -> str:
        return hashlib.sha256(checkpoint.dumps(self.state_dict())).hexdigest()

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    # ---------------------------------------------------------------- forward pieces

    def featurize(self, sentences: Sequence[Sequence[str]], worlds: Sequence[World], training=False, rng=None):
        sb = collate_sentences(sentences)
        ib = collate_images(worlds)
        S0 = encode_sentence(sb.ids, self.encoder, sb.mask, training, rng, self.config.p_lstm)
        I0 = encode_regions(ib.features, self.encoder)
        return S0, I0, sb, ib

    def run_encoder(self, S0, I0, word_mask, region_mask, depth, training=False, rng=None):
        return encode(S0, I0, self.encoder, depth, word_mask, region_mask, training, rng, self.config.p_fc)

    def icr_pair_scores(self, S0, I0, word_mask, region_mask, cap_idx, img_idx, training=False, rng=None,
                        return_maps=False):
        """Relevance of caption ``cap_idx[j]`` to image ``img_idx[j]`` from precomputed inputs."""
        cap_idx = np.asarray(cap_idx)
        img_idx = np.asarray(img_idx)
        tap = self.config.taps["ICR"]
        S = tn.getitem(S0, cap_idx)
        I = tn.getitem(I0, img_idx)
        wm, rm = word_mask[cap_idx], region_mask[img_idx]
        states = self.run_encoder(S, I, wm, rm, tap, training, rng)
        return decode_icr(states, tap, self.decoders.icr, wm, rm, training, rng, self.config.p_fc,
                          return_maps=return_maps)

    def icr_forward(self, worlds: Sequence[World], training=False, rng=None):
        """Scores of matched pairs and of cyclic in-batch negatives (caption of the next world)."""
        B = len(worlds)
        S0, I0, sb, ib = self.featurize([w.caption for w in worlds], worlds, training, rng)
        idx = np.arange(B)
        cap = np.concatenate([idx, (idx + 1) % B])
        img = np.concatenate([idx, idx])
        scores = self.icr_pair_scores(S0, I0, sb.mask, ib.mask, cap, img, training, rng)
        return scores[:B], scores[B:]

    def vqa_forward(self, worlds: Sequence[World], training=False, rng=None, return_maps=False):
        tap = self.config.taps["VQA"]
        S0, I0, sb, ib = self.featurize([w.question for w in worlds], worlds, training, rng)
        states = self.run_encoder(S0, I0, sb.mask, ib.mask, tap, training, rng)
        return decode_vqa(states, tap, self.decoders.vqa, sb.mask, ib.mask, training, rng, self.config.p_fc,
                          return_maps=return_maps)

    def vg_forward(self, worlds: Sequence[World], training=False, rng=None):
        """Phrase-region probabilities ``(B, H, T)`` and the padded grounding batch."""
        tap = self.config.taps["VG"]
        S0, I0, sb, ib = self.featurize([w.caption for w in worlds], worlds, training, rng)
        states = self.run_encoder(S0, I0, sb.mask, ib.mask, tap, training, rng)
        gb = collate_grounding(worlds, sb.ids.shape[1], ib.features.shape[1])
        return decode_vg(states, tap, gb.pool, self.decoders.vg), gb, ib

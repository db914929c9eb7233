"""Task decoders reading one tapped encoder state each.

* retrieval (ICR): two summary networks and a bilinear relevance score
* VQA: two summary networks and a logistic answer MLP (multi-label)
* grounding (VG): average-pooled phrases scored bilinearly against regions
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import tensor as tn
from .encoder import LayerState, glorot, zeros
from .tensor import ShapeError, Tensor


@dataclass
class SummaryNetworkParams:
    W1: Tensor  # (d, d)
    b1: Tensor
    W2: Tensor  # (K, d)
    b2: Tensor

    @classmethod
    def init(cls, rng, d: int, k: int, prefix: str) -> "SummaryNetworkParams":
        if k < 1:
            raise ValueError("need at least one attention map")
        return cls(glorot(rng, d, d, prefix + ".W1"), zeros(d, prefix + ".b1"),
                   glorot(rng, k, d, prefix + ".W2"), zeros(k, prefix + ".b2"))

    def named_parameters(self, prefix: str):
        for n in ("W1", "b1", "W2", "b2"):
            yield f"{prefix}.{n}", getattr(self, n)


@dataclass
class AnswerHeadParams:
    W1: Tensor  # (d, 2d)
    b1: Tensor
    W2: Tensor  # (num_answers, d)
    b2: Tensor

    @classmethod
    def init(cls, rng, d: int, num_answers: int, prefix: str = "vqa.head") -> "AnswerHeadParams":
        if num_answers < 2:
            raise ValueError("answer set needs at least two entries")
        return cls(glorot(rng, d, 2 * d, prefix + ".W1"), zeros(d, prefix + ".b1"),
                   glorot(rng, num_answers, d, prefix + ".W2"), zeros(num_answers, prefix + ".b2"))

    def named_parameters(self, prefix: str):
        for n in ("W1", "b1", "W2", "b2"):
            yield f"{prefix}.{n}", getattr(self, n)


@dataclass
class PairSummaryParams:
    """Image and sentence summary networks of one decoder (no sharing across decoders)."""

    image: SummaryNetworkParams
    sentence: SummaryNetworkParams


@dataclass
class ICRDecoderParams:
    summary: PairSummaryParams
    W: Tensor  # (d, d) bilinear


@dataclass
class VQADecoderParams:
    summary: PairSummaryParams
    head: AnswerHeadParams


@dataclass
class VGDecoderParams:
    W: Tensor  # (d, d) bilinear


@dataclass
class DecoderParams:
    icr: ICRDecoderParams
    vqa: VQADecoderParams
    vg: VGDecoderParams

    @classmethod
    def init(cls, rng, d: int, k: int, num_answers: int) -> "DecoderParams":
        def pair(prefix):
            return PairSummaryParams(SummaryNetworkParams.init(rng, d, k, prefix + ".img"),
                                     SummaryNetworkParams.init(rng, d, k, prefix + ".txt"))

        icr = ICRDecoderParams(pair("icr"), glorot(rng, d, d, "icr.W"))
        vqa = VQADecoderParams(pair("vqa"), AnswerHeadParams.init(rng, d, num_answers))
        vg = VGDecoderParams(glorot(rng, d, d, "vg.W"))
        return cls(icr, vqa, vg)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for task, dec in (("icr", self.icr), ("vqa", self.vqa)):
            yield from dec.summary.image.named_parameters(f"{task}.img")
            yield from dec.summary.sentence.named_parameters(f"{task}.txt")
        yield "icr.W", self.icr.W
        yield from self.vqa.head.named_parameters("vqa.head")
        yield "vg.W", self.vg.W


# ------------------------------------------------------------------ summary network


def _col_linear(W: Tensor, X: Tensor, b: Tensor) -> Tensor:
    if X.shape[-2] != W.shape[1]:
        raise ShapeError(f"feature dim {X.shape[-2]} does not match weight {W.shape}")
    return tn.add(tn.matmul(W, X), tn.reshape(b, (-1, 1)))


def summary_scores(features: Tensor, params: SummaryNetworkParams, training: bool = False, rng=None,
                   p_drop: float = 0.3) -> Tensor:
    """Two-layer ReLU MLP applied to each column of ``(…, d, M)``; returns ``(…, K, M)``."""
    hidden = tn.dropout(tn.relu(_col_linear(params.W1, features, params.b1)), p_drop, training, rng)
    return _col_linear(params.W2, hidden, params.b2)


def attention_average(C: Tensor, mask=None) -> Tensor:
    """Softmax each of the K rows of ``(…, K, M)`` over M and average them: ``(…, M)``."""
    m = None if mask is None else np.asarray(mask, dtype=np.float64)[..., None, :]
    return tn.mean(tn.softmax(C, axis=-1, mask=m), axis=-2)


def summarize(features: Tensor, alpha: Tensor) -> Tensor:
    """Attention-weighted sum of the columns of ``(…, d, M)`` with weights ``(…, M)``."""
    if features.shape[-1] != alpha.shape[-1]:
        raise ShapeError(f"{features.shape[-1]} columns but {alpha.shape[-1]} weights")
    v = tn.matmul(features, tn.reshape(alpha, alpha.shape + (1,)))
    return tn.reshape(v, v.shape[:-1])


def _summary(features, params, mask, training, rng, p_drop):
    alpha = attention_average(summary_scores(features, params, training, rng, p_drop), mask)
    return summarize(features, alpha), alpha


def _bilinear(u: Tensor, W: Tensor, v: Tensor) -> Tensor:
    if u.shape[-1] != W.shape[0] or v.shape[-1] != W.shape[1]:
        raise ShapeError(f"bilinear form: {u.shape} x {W.shape} x {v.shape}")
    flat = tn.reshape(v, (-1, v.shape[-1]))
    Wv = tn.reshape(tn.matmul(flat, W.mT), v.shape[:-1] + (W.shape[0],))
    return tn.tsum(tn.mul(u, Wv), axis=-1)


def icr_score(v_I: Tensor, v_S: Tensor, W: Tensor) -> Tensor:
    """``sigmoid(v_I^T W v_S)`` per pair."""
    return tn.sigmoid(_bilinear(v_I, W, v_S))


def vqa_scores(v_I: Tensor, v_S: Tensor, params: AnswerHeadParams, training: bool = False, rng=None,
               p_drop: float = 0.3) -> Tensor:
    """Independent logistic score per predefined answer (not a distribution)."""
    if v_I.shape != v_S.shape:
        raise ShapeError(f"summary vectors differ: {v_I.shape} vs {v_S.shape}")
    x = tn.concat([v_I, v_S], axis=-1)
    hidden = tn.dropout(tn.relu(tn.affine(x, params.W1, params.b1)), p_drop, training, rng)
    return tn.sigmoid(tn.affine(hidden, params.W2, params.b2))


# ------------------------------------------------------------------ grounding


def phrase_pool(S: Tensor, span: tuple[int, int]) -> Tensor:
    """Mean of word columns ``b..e`` (1-based, inclusive) of a ``(d, N)`` state."""
    b, e = span
    n = S.shape[-1]
    if not 1 <= b <= e <= n:
        raise IndexError(f"span ({b}, {e}) outside 1..{n}")
    return tn.mean(S[..., b - 1 : e], axis=-1)


def pool_phrases(S: Tensor, pool: np.ndarray) -> Tensor:
    """Batched phrase pooling with a ``(…, N, H)`` averaging matrix; returns ``(…, d, H)``."""
    return tn.matmul(S, Tensor(pool))


def vg_score(p: Tensor, i_t: Tensor, W: Tensor) -> Tensor:
    """``sigmoid(p^T W i_t)`` for one phrase-region pair."""
    return tn.sigmoid(_bilinear(p, W, i_t))


def vg_scores(phrases: Tensor, I: Tensor, W: Tensor) -> Tensor:
    """All pairs: phrases ``(…, d, H)``, regions ``(…, d, T)`` -> ``(…, H, T)``."""
    return tn.sigmoid(tn.matmul(tn.matmul(phrases.mT, W), I))


# ------------------------------------------------------------------ tapped decoders


class DecoderMaps(NamedTuple):
    region_weights: Tensor  # (B, T)
    word_weights: Tensor  # (B, N)


def _tap(states: Sequence[LayerState], tap: int) -> LayerState:
    if not 1 <= tap <= len(states):
        raise IndexError(f"tap layer {tap} outside 1..{len(states)}")
    st = states[tap - 1]
    assert st.l == tap
    return st


def decode_icr(states, tap: int, params: ICRDecoderParams, word_mask=None, region_mask=None,
               training: bool = False, rng=None, p_drop: float = 0.3, return_maps: bool = False):
    st = _tap(states, tap)
    v_I, a_I = _summary(st.I, params.summary.image, region_mask, training, rng, p_drop)
    v_S, a_S = _summary(st.S, params.summary.sentence, word_mask, training, rng, p_drop)
    score = icr_score(v_I, v_S, params.W)
    return (score, DecoderMaps(a_I, a_S)) if return_maps else score


def decode_vqa(states, tap: int, params: VQADecoderParams, word_mask=None, region_mask=None,
               training: bool = False, rng=None, p_drop: float = 0.3, return_maps: bool = False):
    st = _tap(states, tap)
    v_I, a_I = _summary(st.I, params.summary.image, region_mask, training, rng, p_drop)
    v_S, a_S = _summary(st.S, params.summary.sentence, word_mask, training, rng, p_drop)
    scores = vqa_scores(v_I, v_S, params.head, training, rng, p_drop)
    return (scores, DecoderMaps(a_I, a_S)) if return_maps else scores


def decode_vg(states, tap: int, spans_or_pool, params: VGDecoderParams) -> Tensor:
    """Phrase-region probabilities ``(…, H, T)``.

    ``spans_or_pool`` is either a list of 1-based ``(b, e)`` spans (unbatched
    use) or a precomputed ``(B, N, H)`` pooling matrix.
    """
    st = _tap(states, tap)
    if isinstance(spans_or_pool, np.ndarray):
        P = pool_phrases(st.S, spans_or_pool)
    else:
        P = tn.stack([phrase_pool(st.S, s) for s in spans_or_pool], axis=-1)
    return vg_scores(P, st.I, params.W)

"""Input featurization and the stack of dense co-attention layers.

Feature maps are stored column-wise: a sentence state is ``(B, d, N)`` and an
image state ``(B, d, T)``. Every function also accepts unbatched ``(d, N)`` /
``(d, T)`` inputs. Optional masks ``(B, N)`` / ``(B, T)`` mark real words and
regions (1) versus padding (0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int, name: str) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_out, fan_in)), requires_grad=True, name=name)


def zeros(n: int, name: str) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True, name=name)


@dataclass
class LSTMDirection:
    W_ih: Tensor  # (4H, d_in); gate rows ordered input, forget, cell, output
    W_hh: Tensor  # (4H, H)
    b: Tensor  # (4H,)

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[1]


@dataclass
class DenseCoattnParams:
    W_S: Tensor  # (d, 2d)
    b_S: Tensor
    W_I: Tensor
    b_I: Tensor


@dataclass
class EncoderParams:
    embed: Tensor  # (vocab, d_e)
    lstm: list[tuple[LSTMDirection, LSTMDirection]]  # per layer: forward, backward
    region_W: Tensor  # (d, d_in)
    region_b: Tensor
    layers: list[DenseCoattnParams]

    @property
    def d(self) -> int:
        return self.region_W.shape[0]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @classmethod
    def init(cls, rng, vocab_size: int, d: int, depth: int, d_in: int, d_embed: int | None = None,
             lstm_layers: int = 2) -> "EncoderParams":
        if d % 2:
            raise ValueError("d must be even: each LSTM direction has d/2 units")
        d_e = d if d_embed is None else d_embed
        h = d // 2
        limit = np.sqrt(6.0 / (vocab_size + d_e))
        embed = Tensor(rng.uniform(-limit, limit, size=(vocab_size, d_e)), requires_grad=True, name="embed")
        lstm = []
        for layer in range(lstm_layers):
            width = d_e if layer == 0 else d
            dirs = []
            for tag in ("fwd", "bwd"):
                pre = f"lstm.{layer}.{tag}"
                dirs.append(LSTMDirection(
                    glorot(rng, 4 * h, width, pre + ".W_ih"),
                    glorot(rng, 4 * h, h, pre + ".W_hh"),
                    zeros(4 * h, pre + ".b"),
                ))
            lstm.append(tuple(dirs))
        layers = [
            DenseCoattnParams(
                glorot(rng, d, 2 * d, f"dcl.{l}.W_S"), zeros(d, f"dcl.{l}.b_S"),
                glorot(rng, d, 2 * d, f"dcl.{l}.W_I"), zeros(d, f"dcl.{l}.b_I"),
            )
            for l in range(1, depth + 1)
        ]
        return cls(embed, lstm, glorot(rng, d, d_in, "region.W"), zeros(d, "region.b"), layers)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed", self.embed
        for i, (fwd, bwd) in enumerate(self.lstm):
            for tag, p in (("fwd", fwd), ("bwd", bwd)):
                yield f"lstm.{i}.{tag}.W_ih", p.W_ih
                yield f"lstm.{i}.{tag}.W_hh", p.W_hh
                yield f"lstm.{i}.{tag}.b", p.b
        yield "region.W", self.region_W
        yield "region.b", self.region_b
        for l, p in enumerate(self.layers, start=1):
            yield f"dcl.{l}.W_S", p.W_S
            yield f"dcl.{l}.b_S", p.b_S
            yield f"dcl.{l}.W_I", p.W_I
            yield f"dcl.{l}.b_I", p.b_I


@dataclass
class LayerState:
    S: Tensor  # (B, d, N)
    I: Tensor  # (B, d, T)
    l: int


class CoAttention(NamedTuple):
    attended_sentence: Tensor  # S-hat, (B, d, T): words pooled per region
    attended_image: Tensor  # I-hat, (B, d, N): regions pooled per word
    affinity: Tensor  # (B, N, T)
    over_regions: Tensor  # (B, N, T), rows sum to 1 over t
    over_words: Tensor  # (B, N, T), columns sum to 1 over n


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return tn.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return tn.reshape(x, x.shape[1:]) if squeeze else x


def _run_direction(X: Tensor, p: LSTMDirection, mask: np.ndarray, reverse: bool) -> Tensor:
    """One LSTM direction over ``X`` (B, N, d_in); returns hidden states (B, N, H)."""
    B, N, _ = X.shape
    H = p.hidden
    gates_in = tn.add(tn.matmul(X, p.W_ih.mT), p.b)  # (B, N, 4H)
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    outs: list[Tensor | None] = [None] * N
    steps = range(N - 1, -1, -1) if reverse else range(N)
    for t in steps:
        z = tn.add(gates_in[:, t, :], tn.matmul(h, p.W_hh.mT))
        sig = tn.sigmoid(z)
        i, f, o = sig[:, :H], sig[:, H : 2 * H], sig[:, 3 * H :]
        g = tn.tanh(z[:, 2 * H : 3 * H])
        c = tn.add(tn.mul(f, c), tn.mul(i, g))
        h = tn.mul(o, tn.tanh(c))
        m = mask[:, t : t + 1]
        if reverse and not np.all(m):
            # padded tail: keep the reverse pass at its zero initial state
            c = tn.mul(c, m)
            h = tn.mul(h, m)
        outs[t] = h
    return tn.stack(outs, axis=1)


def encode_sentence(token_ids, params: EncoderParams, mask=None, training: bool = False,
                    rng=None, p_drop: float = 0.1) -> Tensor:
    """Word features from the 2-layer bidirectional LSTM: ``(B, d, N)`` or ``(d, N)``.

    Each column is ``[forward h; backward h]`` of the top layer at that word.
    Padded columns are zero.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None]
    if ids.shape[1] == 0:
        raise ShapeError("empty sentence")
    mask = np.ones(ids.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(ids.shape)
    X = tn.embedding(params.embed, ids)
    for fwd, bwd in params.lstm:
        X = tn.concat([
            _run_direction(X, fwd, mask, reverse=False),
            _run_direction(X, bwd, mask, reverse=True),
        ], axis=-1)
        X = tn.dropout(X, p_drop, training, rng)
    X = tn.mul(X, mask[..., None])
    return _unbatch(X.mT, squeeze)


def encode_regions(features, params: EncoderParams) -> Tensor:
    """Per-region affine lift of ``(T, d_in)`` or ``(B, T, d_in)`` features to ``(…, d, T)``."""
    F = tn.as_tensor(features)
    if F.shape[-1] != params.region_W.shape[1]:
        raise ShapeError(
            f"region features have d_in={F.shape[-1]}, projection expects {params.region_W.shape[1]}"
        )
    return tn.affine(F, params.region_W, params.region_b).mT


def coattend(S: Tensor, I: Tensor, word_mask=None, region_mask=None) -> CoAttention:
    """Symmetric multiplicative co-attention with affinity ``S^T I / sqrt(d)``."""
    S, squeeze = _batched(S)
    I, _ = _batched(I)
    if S.shape[-2] != I.shape[-2]:
        raise ShapeError(f"coattend: sentence d={S.shape[-2]} but image d={I.shape[-2]}")
    d = S.shape[-2]
    A = tn.mul(tn.matmul(S.mT, I), 1.0 / np.sqrt(d))  # (B, N, T)
    rm = None if region_mask is None else np.asarray(region_mask, dtype=np.float64)[..., None, :]
    wm = None if word_mask is None else np.asarray(word_mask, dtype=np.float64)[..., :, None]
    over_regions = tn.softmax(A, axis=-1, mask=rm)
    over_words = tn.softmax(A, axis=-2, mask=wm)
    I_hat = tn.matmul(I, over_regions.mT)  # (B, d, N)
    S_hat = tn.matmul(S, over_words)  # (B, d, T)
    return CoAttention(
        _unbatch(S_hat, squeeze), _unbatch(I_hat, squeeze), _unbatch(A, squeeze),
        _unbatch(over_regions, squeeze), _unbatch(over_words, squeeze),
    )


def _fuse(X: Tensor, X_att: Tensor, W: Tensor, b: Tensor, training, rng, p_drop) -> Tensor:
    if W.shape != (X.shape[-2], 2 * X.shape[-2]) or X_att.shape != X.shape:
        raise ShapeError(f"fuse: state {X.shape}, attended {X_att.shape}, weight {W.shape}")
    joint = tn.concat([X, X_att], axis=-2)
    z = tn.add(tn.matmul(W, joint), tn.reshape(b, (-1, 1)))
    branch = tn.dropout(tn.relu(z), p_drop, training, rng)
    return tn.add(branch, X)


def fuse_layer(S_prev: Tensor, I_prev: Tensor, attended: tuple[Tensor, Tensor], params: DenseCoattnParams,
               l: int = 1, training: bool = False, rng=None, p_drop: float = 0.3) -> LayerState:
    """Concatenate-linear-ReLU fusion with a residual connection, per word and per region.

    ``attended`` is ``(S_hat, I_hat)`` as returned by :func:`coattend`.
    """
    S_hat, I_hat = attended
    S = _fuse(S_prev, I_hat, params.W_S, params.b_S, training, rng, p_drop)
    I = _fuse(I_prev, S_hat, params.W_I, params.b_I, training, rng, p_drop)
    return LayerState(S, I, l)


def encode(S0: Tensor, I0: Tensor, params: EncoderParams, depth: int | None = None, word_mask=None,
           region_mask=None, training: bool = False, rng=None, p_drop: float = 0.3) -> list[LayerState]:
    """States at depths 1..depth (default: all layers), each one DCL applied to the previous."""
    depth = params.depth if depth is None else depth
    if not 1 <= depth <= params.depth:
        raise ValueError(f"depth {depth} outside 1..{params.depth}")
    states = []
    S, I = S0, I0
    for l in range(1, depth + 1):
        att = coattend(S, I, word_mask, region_mask)
        st = fuse_layer(S, I, (att.attended_sentence, att.attended_image), params.layers[l - 1],
                        l=l, training=training, rng=rng, p_drop=p_drop)
        states.append(st)
        S, I = st.S, st.I
    return states

"""Fusion strategies over modality embeddings.

Adaptive gating fusion (AGF) is the main head; intermediate fusion, scaled
late fusion and cross-modal attention are the comparison baselines. The
three baselines are minimal reconstructions: only their names are fixed,
their internals here are our own choices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from speechcare.encoders import N_CLASSES, ModalityEmbedding
from speechcare.errors import ArityError
from speechcare.nn import autodiff as ad
from speechcare.nn.autodiff import Parameter, Tensor
from speechcare.nn.layers import AttentionBlock, Dense, Module


@dataclass
class FusionOutput:
    gate_weights: np.ndarray      # (M,)
    modality_scores: np.ndarray   # (M, 3)
    fused_logits: np.ndarray      # (3,)

    @property
    def probabilities(self) -> np.ndarray:
        e = np.exp(self.fused_logits - self.fused_logits.max())
        return e / e.sum()


@dataclass
class FusionTrace:
    """Batched graph-level AGF result, kept as tensors for training."""
    gate_weights: Tensor     # (B, M)
    scores: Tensor           # (B, M, 3)
    logits: Tensor           # (B, 3)

    def record(self, i: int) -> FusionOutput:
        return FusionOutput(self.gate_weights.data[i].astype(np.float64),
                            self.scores.data[i].astype(np.float64),
                            self.logits.data[i].astype(np.float64))


def _as_batch(h, dtype) -> Tensor:
    if isinstance(h, ModalityEmbedding):
        h = h.vector
    t = ad.as_tensor(h, dtype)
    if t.data.ndim == 1:
        t = ad.reshape(t, (1, t.shape[0])) if t.requires_grad else ad.Tensor(t.data[None, :])
    return t


class AGFHead(Module):
    """z_i = tanh(FC_i(h_i)); w = softmax(G [z_1; ...; z_M]); y = sum_i w_i C_i(z_i)."""

    def __init__(self, input_dims: Sequence[int], rng: np.random.Generator, hidden: int = 128,
                 dropout: float = 0.1, dtype=np.float32):
        if len(input_dims) not in (2, 3):
            raise ArityError(f"AGF supports 2 or 3 modalities, got {len(input_dims)}")
        self.encoders = [Dense(d, hidden, rng, activation="tanh", dtype=dtype) for d in input_dims]
        # zero init -> uniform gate weights at the start of training
        self.gate = Dense(hidden * len(input_dims), len(input_dims), rng, dtype=dtype, zero=True)
        self.classifiers = [Dense(hidden, N_CLASSES, rng, dtype=dtype) for _ in input_dims]
        self._hidden = hidden
        self._dropout = dropout

    @property
    def n_modalities(self) -> int:
        return len(self.encoders)

    def trace(self, embeddings: Sequence, present: np.ndarray | None = None, training: bool = False,
              rng: np.random.Generator | None = None) -> FusionTrace:
        m = self.n_modalities
        if len(embeddings) != m:
            raise ArityError(f"expected {m} modality embeddings, got {len(embeddings)}")
        dtype = self.gate.weight.dtype
        batch = next((_as_batch(h, dtype).shape[0] for h in embeddings if h is not None), None)
        if batch is None:
            raise ArityError("no modality present")
        if present is None:
            missing = [i for i, h in enumerate(embeddings) if h is None]
            if missing:
                raise ArityError(f"modalities {missing} missing and no presence mask given")
            present = np.ones((batch, m), bool)
        present = np.broadcast_to(np.asarray(present, bool), (batch, m))
        if not present.any(axis=1).all():
            raise ArityError("every record needs at least one present modality")
        masked = not present.all()

        zs = []
        for i, (enc, h) in enumerate(zip(self.encoders, embeddings)):
            if h is None:
                z = ad.Tensor(np.zeros((batch, self._hidden), dtype=dtype))
            else:
                z = ad.dropout(enc(_as_batch(h, dtype)), self._dropout, rng, training)
                if masked and not present[:, i].all():
                    z = ad.mul(z, present[:, i:i + 1].astype(dtype))
            zs.append(z)
        gate_logits = self.gate(ad.concat(zs, axis=-1))
        if masked:
            gate_logits = gate_logits + np.where(present, 0.0, -np.inf).astype(dtype)
        w = ad.softmax(gate_logits, axis=-1)
        scores = ad.concat([ad.reshape(c(z), (batch, 1, N_CLASSES)) for c, z in zip(self.classifiers, zs)], axis=1)
        y = ad.sum(ad.mul(ad.reshape(w, (batch, m, 1)), scores), axis=1)
        return FusionTrace(w, scores, y)

    def __call__(self, embeddings, present=None, training=False, rng=None) -> Tensor:
        return self.trace(embeddings, present, training, rng).logits


def agf_forward(head: AGFHead, embeddings: Sequence) -> FusionOutput:
    return head.trace(list(embeddings)).record(0)


def agf_forward_masked(head: AGFHead, embeddings: Sequence, present: Sequence[bool]) -> FusionOutput:
    present = np.asarray(present, bool)
    if not present.any():
        raise ArityError("at least one modality must be present")
    embeddings = [h if p else None for h, p in zip(embeddings, present)]
    return head.trace(embeddings, present[None, :]).record(0)


class IntermediateFusion(Module):
    """concat(h_i) -> FC(hidden, tanh) -> FC(3)."""

    def __init__(self, input_dims: Sequence[int], rng: np.random.Generator, hidden: int = 128,
                 dropout: float = 0.1, dtype=np.float32):
        self.hidden = Dense(int(sum(input_dims)), hidden, rng, activation="tanh", dtype=dtype)
        self.out = Dense(hidden, N_CLASSES, rng, dtype=dtype)
        self._dims = tuple(input_dims)
        self._dropout = dropout

    def __call__(self, embeddings: Sequence, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        if len(embeddings) != len(self._dims) or any(h is None for h in embeddings):
            raise ArityError(f"intermediate fusion needs {len(self._dims)} embeddings")
        dtype = self.out.weight.dtype
        x = ad.concat([_as_batch(h, dtype) for h in embeddings], axis=-1)
        return self.out(ad.dropout(self.hidden(x), self._dropout, rng, training))


def intermediate_fusion(head: IntermediateFusion, embeddings: Sequence) -> np.ndarray:
    return head(list(embeddings)).data[0]


class ScaledLateFusion(Module):
    """Per-modality linear classifiers mixed by input-independent softmax weights."""

    def __init__(self, input_dims: Sequence[int], rng: np.random.Generator, dtype=np.float32):
        if len(input_dims) < 2:
            raise ArityError("late fusion needs at least two modalities")
        self.classifiers = [Dense(d, N_CLASSES, rng, dtype=dtype) for d in input_dims]
        self.mix = Parameter(np.zeros(len(input_dims), dtype=dtype))

    def weights(self) -> np.ndarray:
        v = self.mix.data.astype(np.float64)
        e = np.exp(v - v.max())
        return e / e.sum()

    def __call__(self, embeddings: Sequence, training: bool = False, rng=None) -> Tensor:
        if len(embeddings) != len(self.classifiers) or any(h is None for h in embeddings):
            raise ArityError(f"late fusion needs {len(self.classifiers)} embeddings")
        dtype = self.mix.dtype
        hs = [_as_batch(h, dtype) for h in embeddings]
        b = hs[0].shape[0]
        scores = ad.concat([ad.reshape(c(h), (b, 1, N_CLASSES)) for c, h in zip(self.classifiers, hs)], axis=1)
        alpha = ad.reshape(ad.softmax(self.mix), (1, len(hs), 1))
        return ad.sum(ad.mul(alpha, scores), axis=1)


def scaled_late_fusion(head: ScaledLateFusion, embeddings: Sequence) -> np.ndarray:
    return head(list(embeddings)).data[0]


class CrossModalAttentionFusion(Module):
    """Acoustic CLS attends over text states and text CLS over acoustic states.

    The two attended vectors (plus h_D when configured) go through an
    intermediate-fusion head.
    """

    def __init__(self, model_dim: int, rng: np.random.Generator, heads: int = 4, demo_dim: int | None = None,
                 hidden: int = 128, dropout: float = 0.1, dtype=np.float32):
        self.audio_to_text = AttentionBlock(model_dim, heads, rng, dropout, dtype=dtype)
        self.text_to_audio = AttentionBlock(model_dim, heads, rng, dropout, dtype=dtype)
        dims = [model_dim, model_dim] + ([demo_dim] if demo_dim else [])
        self.head = IntermediateFusion(dims, rng, hidden, dropout, dtype)
        self._with_demo = bool(demo_dim)

    def __call__(self, acoustic_states, text_states, h_demo=None, acoustic_mask=None, text_mask=None,
                 training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        dtype = self.head.out.weight.dtype
        a = _as_seq(acoustic_states, dtype)
        t = _as_seq(text_states, dtype)
        if self._with_demo and h_demo is None:
            raise ArityError("cross-modal fusion configured with demographics but h_D missing")
        attended_a = self.audio_to_text.attend(a[:, 0:1, :], t, text_mask, training, rng)[:, 0, :]
        attended_t = self.text_to_audio.attend(t[:, 0:1, :], a, acoustic_mask, training, rng)[:, 0, :]
        parts = [attended_a, attended_t] + ([h_demo] if self._with_demo else [])
        return self.head(parts, training, rng)


def _as_seq(x, dtype) -> Tensor:
    t = ad.as_tensor(x, dtype)
    if t.data.ndim == 2:
        t = ad.Tensor(t.data[None]) if not t.requires_grad else ad.reshape(t, (1,) + t.shape)
    return t


def cross_modal_attention_fusion(head: CrossModalAttentionFusion, acoustic_sequence: np.ndarray,
                                 text_sequence: np.ndarray, h_demo: np.ndarray | None = None) -> np.ndarray:
    return head(acoustic_sequence, text_sequence, None if h_demo is None else _as_batch(h_demo, head.head.out.weight.dtype)).data[0]

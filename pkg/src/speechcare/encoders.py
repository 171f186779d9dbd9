"""Acoustic, linguistic and demographic pathways producing h_A, h_L and h_D."""
from __future__ import annotations

import math
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from speechcare import audio
from speechcare.data import DEMOGRAPHIC_WIDTH
from speechcare.errors import FormatError, ShapeError
from speechcare.nn import autodiff as ad
from speechcare.nn.autodiff import Parameter, Tensor
from speechcare.nn.layers import AttentionBlock, Dense, Module

N_CLASSES = 3
MAX_ACOUSTIC_FRAMES = audio.MAX_WINDOWS * audio.FRAMES_PER_SEGMENT
EMBEDDING_MAGIC = b"SCEMB1\x00"
_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


@dataclass
class ModalityEmbedding:
    vector: np.ndarray
    modality: str


@dataclass
class AcousticInput:
    """One record's acoustic input.

    ``kind`` is ``frames`` (n x 17 featurizer output), ``sequence``
    (n x model_dim, enters after the frame projection) or ``vector``
    (1 x model_dim, used directly as h_A).
    """
    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in ("frames", "sequence", "vector"):
            raise ShapeError(f"unknown acoustic input kind {self.kind!r}")
        self.values = np.atleast_2d(np.asarray(self.values))
        if self.kind != "vector" and len(self.values) > MAX_ACOUSTIC_FRAMES:
            raise ShapeError(f"acoustic sequence longer than {MAX_ACOUSTIC_FRAMES}")


@dataclass
class EncodedBatch:
    summary: Tensor            # (B, d)
    states: Tensor             # (B, T, d), position 0 is the CLS state
    mask: np.ndarray           # (B, T) valid positions


def _broadcast_rows(vec: Parameter, batch: int) -> Tensor:
    zeros = np.zeros((batch, 1, vec.shape[-1]), dtype=vec.dtype)
    return ad.add(zeros, ad.reshape(vec, (1, 1, vec.shape[-1])))


def _pad_stack(arrays: Sequence[np.ndarray], dtype) -> tuple[np.ndarray, np.ndarray]:
    t = max(len(a) for a in arrays)
    width = arrays[0].shape[-1]
    out = np.zeros((len(arrays), t, width), dtype=dtype)
    mask = np.zeros((len(arrays), t), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, :len(a)] = a
        mask[i, :len(a)] = True
    return out, mask


def _pad_tensor(t: Tensor, length: int) -> Tensor:
    if t.shape[1] == length:
        return t
    pad = np.zeros((t.shape[0], length - t.shape[1], t.shape[2]), dtype=t.dtype)
    return ad.concat([t, pad], axis=1)


class AcousticPathway(Module):
    """Frame projection -> [CLS; frames] -> stacked attention blocks -> CLS state."""

    def __init__(self, rng: np.random.Generator, model_dim: int = 32, heads: int = 4, blocks: int = 2,
                 dropout: float = 0.1, frame_dim: int = audio.FEATURE_DIM, dtype=np.float32):
        self.frame_proj = Dense(frame_dim, model_dim, rng, dtype=dtype)
        self.cls = Parameter(rng.normal(0.0, 0.02, model_dim).astype(dtype))
        self.blocks = [AttentionBlock(model_dim, heads, rng, dropout, dtype=dtype) for _ in range(blocks)]
        self.classifier = Dense(model_dim, N_CLASSES, rng, dtype=dtype)
        # fixed per-feature standardization of featurizer output, fitted on training data
        self.feature_mean = Parameter(np.zeros(frame_dim, dtype=dtype))
        self.feature_scale = Parameter(np.ones(frame_dim, dtype=dtype))
        self._frozen = ("feature_mean", "feature_scale")
        self._dim = model_dim

    @property
    def model_dim(self) -> int:
        return self._dim

    def fit_normalizer(self, frame_arrays: Sequence[np.ndarray]) -> None:
        stacked = np.concatenate([np.asarray(f, np.float64) for f in frame_arrays], axis=0)
        self.feature_mean.data = stacked.mean(axis=0).astype(self.cls.dtype)
        self.feature_scale.data = (1.0 / np.maximum(stacked.std(axis=0), 1e-3)).astype(self.cls.dtype)

    def _standardize(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.feature_mean.data) * self.feature_scale.data

    def run_encoder(self, seq: Tensor, mask: np.ndarray, training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
        b = seq.shape[0]
        h = ad.concat([_broadcast_rows(self.cls, b), seq], axis=1)
        full_mask = np.concatenate([np.ones((b, 1), bool), mask], axis=1)
        for block in self.blocks:
            h = block(h, key_mask=full_mask, training=training, rng=rng)
        return h

    def encode(self, inputs: Sequence[AcousticInput], training: bool = False,
               rng: np.random.Generator | None = None) -> EncodedBatch:
        dtype = self.cls.dtype
        groups: dict[str, list[int]] = {"frames": [], "sequence": [], "vector": []}
        for i, item in enumerate(inputs):
            groups[item.kind].append(i)
        parts: list[tuple[list[int], Tensor, Tensor, np.ndarray]] = []
        for kind in ("frames", "sequence"):
            idx = groups[kind]
            if not idx:
                continue
            arrays = [inputs[i].values for i in idx]
            if kind == "frames":
                arrays = [self._standardize(a) for a in arrays]
            elif any(a.shape[1] != self._dim for a in arrays):
                raise ShapeError(f"precomputed acoustic sequences must have width {self._dim}")
            padded, mask = _pad_stack(arrays, dtype)
            seq = self.frame_proj(ad.Tensor(padded)) if kind == "frames" else ad.Tensor(padded)
            states = self.run_encoder(seq, mask, training, rng)
            full_mask = np.concatenate([np.ones((len(idx), 1), bool), mask], axis=1)
            parts.append((idx, states[:, 0, :], states, full_mask))
        if groups["vector"]:
            idx = groups["vector"]
            vecs = np.stack([inputs[i].values[0] for i in idx]).astype(dtype)
            if vecs.shape[1] != self._dim:
                raise ShapeError(f"precomputed h_A must have width {self._dim}")
            t = ad.Tensor(vecs)
            parts.append((idx, t, ad.reshape(t, (len(idx), 1, self._dim)), np.ones((len(idx), 1), bool)))
        return _assemble(parts, len(inputs))

    def logits(self, h: Tensor) -> Tensor:
        return self.classifier(h)


def _assemble(parts, n: int) -> EncodedBatch:
    if len(parts) == 1 and parts[0][0] == list(range(n)):
        _, summary, states, mask = parts[0]
        return EncodedBatch(summary, states, mask)
    t = max(p[2].shape[1] for p in parts)
    order = [i for p in parts for i in p[0]]
    inverse = np.argsort(order)
    summary = ad.concat([p[1] for p in parts], axis=0)[inverse]
    states = ad.concat([_pad_tensor(p[2], t) for p in parts], axis=0)[inverse]
    mask = np.zeros((n, t), bool)
    for idx, _, _, m in parts:
        mask[idx, :m.shape[1]] = m
    return EncodedBatch(summary, states, mask)


# ------------------------------------------------------------------ text

def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def hash_tokens(tokens: Sequence[str], vocab: int, cap: int) -> np.ndarray:
    ids = [zlib.crc32(tok.encode("utf-8")) % vocab for tok in tokens[:cap]]
    return np.asarray(ids, dtype=np.int64)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class LinguisticPathway(Module):
    """Hashed tokens -> embeddings + positions -> attention blocks -> tanh(FC(CLS))."""

    def __init__(self, rng: np.random.Generator, model_dim: int = 32, heads: int = 4, blocks: int = 2,
                 dropout: float = 0.1, vocab: int = 4096, context: int = 512, dtype=np.float32):
        self.embedding = Parameter(rng.normal(0.0, 1.0 / math.sqrt(model_dim), (vocab, model_dim)).astype(dtype))
        self.cls = Parameter(rng.normal(0.0, 0.02, model_dim).astype(dtype))
        self.blocks = [AttentionBlock(model_dim, heads, rng, dropout, dtype=dtype) for _ in range(blocks)]
        self.summary = Dense(model_dim, model_dim, rng, activation="tanh", dtype=dtype)
        self.classifier = Dense(model_dim, N_CLASSES, rng, dtype=dtype)
        self._vocab = vocab
        self._context = context
        self._dim = model_dim
        self._positions = sinusoidal_positions(context + 1, model_dim).astype(dtype)

    @property
    def vocab(self) -> int:
        return self._vocab

    @property
    def context(self) -> int:
        return self._context

    def token_ids(self, transcript: str) -> np.ndarray:
        return hash_tokens(tokenize(transcript), self._vocab, self._context)

    def encode(self, token_ids: Sequence[np.ndarray], training: bool = False,
               rng: np.random.Generator | None = None) -> EncodedBatch:
        b = len(token_ids)
        t = max(len(ids) for ids in token_ids) + 1
        padded = np.zeros((b, t - 1), dtype=np.int64)
        mask = np.zeros((b, t), dtype=bool)
        mask[:, 0] = True
        for i, ids in enumerate(token_ids):
            ids = np.asarray(ids, dtype=np.int64)[:self._context]
            padded[i, :len(ids)] = ids
            mask[i, 1:len(ids) + 1] = True
        parts = [_broadcast_rows(self.cls, b)]
        if t > 1:
            parts.append(ad.embedding(self.embedding, padded))
        h = ad.concat(parts, axis=1) + self._positions[:t]
        for block in self.blocks:
            h = block(h, key_mask=mask, training=training, rng=rng)
        return EncodedBatch(self.summary(h[:, 0, :]), h, mask)

    def logits(self, h: Tensor) -> Tensor:
        return self.classifier(h)


# ----------------------------------------------------------- demographics

class DemographicPathway(Module):
    def __init__(self, rng: np.random.Generator, demo_dim: int = 128, dtype=np.float32,
                 in_dim: int = DEMOGRAPHIC_WIDTH):
        self.proj = Dense(in_dim, demo_dim, rng, activation="tanh", dtype=dtype)
        self.classifier = Dense(demo_dim, N_CLASSES, rng, dtype=dtype)

    def encode(self, demo: np.ndarray) -> Tensor:
        demo = np.atleast_2d(np.asarray(demo, dtype=self.proj.weight.dtype))
        if demo.shape[1] != self.proj.n_in:
            raise ShapeError(f"demographic vector must have width {self.proj.n_in}, got {demo.shape[1]}")
        return self.proj(ad.Tensor(demo))

    def logits(self, h: Tensor) -> Tensor:
        return self.classifier(h)


# ------------------------------------------------------ single-record helpers

def encode_acoustic(pathway: AcousticPathway, wave: audio.Waveform) -> tuple[ModalityEmbedding, np.ndarray]:
    enc = pathway.encode([AcousticInput("frames", audio.acoustic_frames(wave))])
    return ModalityEmbedding(enc.summary.data[0].copy(), "acoustic"), pathway.logits(enc.summary).data[0]


def encode_text(pathway: LinguisticPathway, transcript: str) -> tuple[ModalityEmbedding, np.ndarray]:
    enc = pathway.encode([pathway.token_ids(transcript)])
    return ModalityEmbedding(enc.summary.data[0].copy(), "linguistic"), pathway.logits(enc.summary).data[0]


def encode_demographics_latent(pathway: DemographicPathway, demo: np.ndarray) -> tuple[ModalityEmbedding, np.ndarray]:
    h = pathway.encode(demo)
    return ModalityEmbedding(h.data[0].copy(), "demographic"), pathway.logits(h).data[0]


# ------------------------------------------------------ embedding files

def save_embedding(path, matrix: np.ndarray) -> None:
    mat = np.atleast_2d(np.asarray(matrix))
    header = EMBEDDING_MAGIC + struct.pack("<II", *mat.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(mat, dtype="<f4").tobytes())


def read_embedding(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(EMBEDDING_MAGIC):
        raise FormatError(f"{path}: bad embedding magic")
    head = len(EMBEDDING_MAGIC)
    if len(blob) < head + 8:
        raise FormatError(f"{path}: truncated header")
    rows, cols = struct.unpack_from("<II", blob, head)
    payload = blob[head + 8:]
    if len(payload) != rows * cols * 4:
        raise FormatError(f"{path}: header says {rows}x{cols} but payload has {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)


def load_precomputed(path) -> ModalityEmbedding | AcousticInput:
    """1 x d files become a ModalityEmbedding; n x d files a sequence entering after projection."""
    mat = read_embedding(path)
    if mat.shape[0] == 1:
        return ModalityEmbedding(mat[0], "acoustic")
    return AcousticInput("sequence", mat)

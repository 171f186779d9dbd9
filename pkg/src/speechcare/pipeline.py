"""Records -> model-ready examples -> batches, plus the end-to-end run helpers."""
from __future__ import annotations

import hashlib
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from speechcare import audio, metrics
from speechcare.data import LABELS, ManifestRecord, encode_demographics, impute_education, stratified_split
from speechcare.encoders import AcousticInput, ModalityEmbedding, hash_tokens, load_precomputed, tokenize
from speechcare.model import Batch, ModelConfig, SpeechCareModel
from speechcare.training import RunResult, TrainConfig, predict, train

log = logging.getLogger(__name__)


@dataclass
class Example:
    uid: str
    acoustic: AcousticInput
    tokens: np.ndarray
    demographics: np.ndarray
    label: int                # -1 when unlabeled
    groups: dict


def _mask_rng(seed: int, uid: str) -> np.random.Generator:
    return np.random.default_rng([seed, 11, zlib.crc32(uid.encode())])


def _cache_name(record: ManifestRecord, seed: int) -> str:
    key = f"{record.audio_path}|{record.augment}|{seed if record.augment else ''}"
    return hashlib.sha1(key.encode()).hexdigest()[:16] + ".npy"


def acoustic_input(record: ManifestRecord, seed: int = 0, cache_dir=None) -> AcousticInput:
    """Frames from audio (cached when ``cache_dir`` is set) or a precomputed embedding file."""
    if record.embedding_path and not record.audio_path:
        loaded = load_precomputed(record.embedding_path)
        if isinstance(loaded, ModalityEmbedding):
            return AcousticInput("vector", loaded.vector)
        return loaded
    cache = Path(cache_dir) / _cache_name(record, seed) if cache_dir else None
    if cache is not None and cache.exists():
        return AcousticInput("frames", np.load(cache))
    wave = audio.read_wav(record.audio_path)
    frames = audio.acoustic_frames(wave, _mask_rng(seed, record.uid) if record.augment else None)
    frames = frames.astype(np.float32)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.save(cache, frames)
    return AcousticInput("frames", frames)


def prepare_examples(records: Sequence[ManifestRecord], model_config: ModelConfig, seed: int = 0,
                     cache_dir=None) -> list[Example]:
    if any(r.education is None or r.age is None for r in records):
        records = impute_education(records, seed=seed)
    need_audio = "acoustic" in model_config.modalities
    out = []
    for r in records:
        ac = acoustic_input(r, seed, cache_dir) if need_audio else AcousticInput("vector", np.zeros(1))
        tokens = hash_tokens(tokenize(r.transcript), model_config.vocab, model_config.context)
        out.append(Example(r.uid, ac, tokens, encode_demographics(r),
                           LABELS.index(r.label) if r.label else -1, r.groups()))
    return out


def collate(examples: Sequence[Example]) -> Batch:
    return Batch(acoustic=[e.acoustic for e in examples],
                 tokens=[e.tokens for e in examples],
                 demographics=np.stack([e.demographics for e in examples]),
                 labels=np.array([e.label for e in examples], dtype=np.int64),
                 uids=[e.uid for e in examples])


def build_model(model_config: ModelConfig, train_config: TrainConfig, train_examples: Sequence[Example]) -> SpeechCareModel:
    """Model whose dropout/hidden follow the training config, with a fitted frame normalizer."""
    cfg = ModelConfig(**{**model_config.to_dict(), "dropout": train_config.dropout,
                         "hidden": train_config.hidden, "seed": train_config.seed})
    model = SpeechCareModel(cfg)
    if "acoustic" in cfg.modalities:
        frames = [e.acoustic.values for e in train_examples if e.acoustic.kind == "frames"]
        if frames:
            model.acoustic.fit_normalizer(frames)
    return model


def validation_metrics(probs: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    preds = metrics.PredictionSet([str(i) for i in range(len(labels))], probs, labels)
    out = {"log_loss": metrics.log_loss(probs, labels),
           "f1_micro": metrics.micro_f1(metrics.confusion_matrix(labels, preds.predicted()))}
    try:
        out["auc_micro"] = metrics.auc_ovr(preds, "micro")
        out["auc_weighted"] = metrics.auc_ovr(preds, "weighted")
    except Exception as exc:  # single-class validation sets
        log.warning("AUC unavailable: %s", exc)
    return out


def split_examples(records: Sequence[ManifestRecord], examples: Sequence[Example], fraction: float = 0.2,
                   seed: int = 0) -> tuple[list[Example], list[Example]]:
    """Stratified split; oversampled duplicates always stay in training."""
    originals = [r for r in records if not r.augment]
    assignment = stratified_split(originals, fraction, seed)
    train_ex, val_ex = [], []
    for r, e in zip(records, examples):
        (val_ex if assignment.get(r.uid) == "validation" else train_ex).append(e)
    return train_ex, val_ex


def run_training(train_examples: Sequence[Example], val_examples: Sequence[Example], model_config: ModelConfig,
                 train_config: TrainConfig) -> tuple[SpeechCareModel, RunResult]:
    model = build_model(model_config, train_config, train_examples)
    result = train(model, train_examples, val_examples, train_config, collate, evaluate=validation_metrics)
    return model, result


def predictions(model: SpeechCareModel, examples: Sequence[Example], batch_size: int = 16) -> metrics.PredictionSet:
    probs = predict(model, examples, collate, batch_size)
    return metrics.PredictionSet([e.uid for e in examples], probs, np.array([e.label for e in examples]),
                                 [e.groups for e in examples])

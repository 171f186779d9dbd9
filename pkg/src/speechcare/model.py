"""The assembled multimodal classifier: pathways + one fusion strategy."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from speechcare.encoders import (
    AcousticInput,
    AcousticPathway,
    DemographicPathway,
    LinguisticPathway,
)
from speechcare.errors import ValidationError
from speechcare.fusion import (
    AGFHead,
    CrossModalAttentionFusion,
    FusionTrace,
    IntermediateFusion,
    ScaledLateFusion,
)
from speechcare.nn import autodiff as ad
from speechcare.nn.autodiff import Tensor
from speechcare.nn.layers import Module

MODALITIES = ("acoustic", "text", "demographic")
FUSIONS = ("agf", "intermediate", "late", "cross_attention", "single")
DEMOGRAPHIC_FIELDS = {"age": slice(0, 3), "gender": slice(3, 5), "education": slice(5, 9)}


@dataclass
class ModelConfig:
    modalities: tuple[str, ...] = MODALITIES
    fusion: str = "agf"
    model_dim: int = 32
    heads: int = 4
    blocks: int = 2
    dropout: float = 0.1
    hidden: int = 128
    demo_dim: int = 128
    vocab: int = 4096
    context: int = 512
    demographic_fields: tuple[str, ...] = ("age", "gender", "education")
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.demographic_fields = tuple(self.demographic_fields)
        bad = [m for m in self.modalities if m not in MODALITIES]
        if bad or not self.modalities:
            raise ValidationError(f"model.modalities: unknown or empty {bad or self.modalities}")
        if self.fusion not in FUSIONS:
            raise ValidationError(f"model.fusion: unknown strategy {self.fusion!r}")
        if self.fusion == "single" and len(self.modalities) != 1:
            raise ValidationError("model.fusion: 'single' needs exactly one modality")
        if self.fusion != "single" and len(self.modalities) < 2:
            raise ValidationError(f"model.fusion: {self.fusion!r} needs at least two modalities")
        if self.fusion == "cross_attention" and not {"acoustic", "text"} <= set(self.modalities):
            raise ValidationError("model.fusion: cross_attention needs acoustic and text")
        if any(f not in DEMOGRAPHIC_FIELDS for f in self.demographic_fields):
            raise ValidationError(f"model.demographic_fields: unknown field in {self.demographic_fields}")
        for name in ("model_dim", "heads", "blocks", "hidden", "demo_dim", "vocab", "context"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"model.{name}: must be >= 1")
        if self.model_dim % self.heads:
            raise ValidationError("model.heads: must divide model_dim")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("model.dropout: must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValidationError("model.precision: must be float32 or float64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modalities"] = list(self.modalities)
        d["demographic_fields"] = list(self.demographic_fields)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"model: unknown fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    acoustic: list[AcousticInput] | None
    tokens: list[np.ndarray] | None
    demographics: np.ndarray | None
    labels: np.ndarray | None = None
    uids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        for part in (self.acoustic, self.tokens, self.demographics):
            if part is not None:
                return len(part)
        return 0


@dataclass
class ModelOutput:
    logits: Tensor
    fusion: FusionTrace | None = None


class SpeechCareModel(Module):
    def __init__(self, config: ModelConfig):
        self._config = config
        rng = np.random.default_rng(config.seed)
        dtype = config.dtype
        dims = []
        if "acoustic" in config.modalities:
            self.acoustic = AcousticPathway(rng, config.model_dim, config.heads, config.blocks, config.dropout,
                                            dtype=dtype)
            dims.append(config.model_dim)
        if "text" in config.modalities:
            self.text = LinguisticPathway(rng, config.model_dim, config.heads, config.blocks, config.dropout,
                                          config.vocab, config.context, dtype=dtype)
            dims.append(config.model_dim)
        if "demographic" in config.modalities:
            self.demographic = DemographicPathway(rng, config.demo_dim, dtype=dtype)
            dims.append(config.demo_dim)
        if config.fusion == "agf":
            self.fusion = AGFHead(dims, rng, config.hidden, config.dropout, dtype)
        elif config.fusion == "intermediate":
            self.fusion = IntermediateFusion(dims, rng, config.hidden, config.dropout, dtype)
        elif config.fusion == "late":
            self.fusion = ScaledLateFusion(dims, rng, dtype)
        elif config.fusion == "cross_attention":
            demo = config.demo_dim if "demographic" in config.modalities else None
            self.fusion = CrossModalAttentionFusion(config.model_dim, rng, config.heads, demo, config.hidden,
                                                    config.dropout, dtype)
        demo_mask = np.zeros(9, dtype=dtype)
        for name in config.demographic_fields:
            demo_mask[DEMOGRAPHIC_FIELDS[name]] = 1.0
        self._demo_mask = demo_mask

    @property
    def config(self) -> ModelConfig:
        return self._config

    def parameter_group(self, name: str) -> str:
        """Learning-rate group: encoder-body stand-ins vs. everything else.

        The frame projection stands in for the acoustic encoder body and the
        text attention blocks for the text encoder body. Token embeddings,
        CLS vectors, the CSE and all heads start untrained and use the
        general rate.
        """
        if name.startswith("acoustic.frame_proj."):
            return "acoustic"
        if name.startswith("text.blocks."):
            return "text"
        return "other"

    def forward(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> ModelOutput:
        cfg = self._config
        enc_a = enc_t = h_d = None
        if "acoustic" in cfg.modalities:
            enc_a = self.acoustic.encode(batch.acoustic, training, rng)
        if "text" in cfg.modalities:
            enc_t = self.text.encode(batch.tokens, training, rng)
        if "demographic" in cfg.modalities:
            h_d = self.demographic.encode(np.asarray(batch.demographics) * self._demo_mask)
        if cfg.fusion == "single":
            if enc_a is not None:
                return ModelOutput(self.acoustic.logits(ad.dropout(enc_a.summary, cfg.dropout, rng, training)))
            if enc_t is not None:
                return ModelOutput(self.text.logits(ad.dropout(enc_t.summary, cfg.dropout, rng, training)))
            return ModelOutput(self.demographic.logits(ad.dropout(h_d, cfg.dropout, rng, training)))
        if cfg.fusion == "cross_attention":
            logits = self.fusion(enc_a.states, enc_t.states, h_d, enc_a.mask, enc_t.mask, training, rng)
            return ModelOutput(logits)
        hs = [e.summary for e in (enc_a, enc_t) if e is not None] + ([h_d] if h_d is not None else [])
        if cfg.fusion == "agf":
            tr = self.fusion.trace(hs, training=training, rng=rng)
            return ModelOutput(tr.logits, tr)
        return ModelOutput(self.fusion(hs, training=training, rng=rng))

    def predict_proba(self, batch: Batch) -> np.ndarray:
        logits = self.forward(batch).logits.data.astype(np.float64)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

"""Synthetic corpus with planted, class-dependent acoustic, linguistic and demographic cues.

Every record carries two private latents, one per speech modality:
``strength * class_index + noise * N(0, 1)``. The acoustic latent sets
pause length and tone pitch; the linguistic latent selects which class's
marker vocabulary dominates the marker tokens into the transcript and the filler rate.
Independent noise per modality means fusing the two recovers more of the
label than either alone. With strength 0 the class-conditional
distributions coincide.
"""
from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from speechcare import audio
from speechcare.data import EDUCATION_LEVELS, GENDERS, LABELS, LANGUAGES, ManifestRecord, write_manifest
from speechcare.errors import ValidationError

COMMON_WORDS = (
    "the a and to of in is it that was he she they we you there this with on for at his her "
    "picture boy girl cookie jar stool mother kitchen sink water window plate dish curtain "
    "garden outside floor cupboard standing reaching falling taking washing drying looking "
    "running over spilling trying getting open shelf table chair little big tall short "
    "left right up down near behind then now also just very some all going doing seeing"
).split()
MARKER_WORDS = {
    0: "precisely notably meanwhile evidently balanced careful distinct orderly clearly "
       "specifically accordingly sequence detail attentive complete coherent describe".split(),
    1: "somewhat maybe perhaps sort kind thing stuff around again forgot similar roughly "
       "guess probably unsure something whatever wait".split(),
    2: "thingy whatchamacallit lost nothing dunno huh blank confused mixed missing gone "
       "forget forgetting where who whichever".split(),
}
FILLERS = ("uh", "um", "er", "hmm")
AGE_RANGES = {0: (46, 65), 1: (66, 80), 2: (81, 95)}


@dataclass
class SynthSpec:
    n_records: int = 750
    priors: tuple[float, float, float] = (0.4, 0.3, 0.3)
    acoustic_strength: float = 0.8
    linguistic_strength: float = 0.8
    demographic_strength: float = 0.5
    noise: float = 0.5
    language_mix: dict[str, float] = field(default_factory=lambda: {"english": 0.6, "spanish": 0.25,
                                                                      "mandarin": 0.15})
    education_missing: float = 0.15
    duration: float = 6.0
    sample_rate: int = 16000
    words: tuple[int, int] = (30, 60)
    seed: int = 0

    def __post_init__(self):
        self.priors = tuple(float(p) for p in self.priors)
        self.words = tuple(int(w) for w in self.words)
        if self.n_records < 1:
            raise ValidationError("synth.n_records: must be >= 1")
        if len(self.priors) != 3 or abs(sum(self.priors) - 1.0) > 1e-9 or min(self.priors) < 0:
            raise ValidationError("synth.priors: three non-negative values summing to 1")
        for name in ("acoustic_strength", "linguistic_strength", "demographic_strength", "education_missing"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"synth.{name}: must lie in [0, 1]")
        if self.noise < 0:
            raise ValidationError("synth.noise: must be >= 0")
        if set(self.language_mix) - set(LANGUAGES) or abs(sum(self.language_mix.values()) - 1.0) > 1e-9:
            raise ValidationError("synth.language_mix: known languages with weights summing to 1")
        if self.duration <= 0 or self.sample_rate < 1000:
            raise ValidationError("synth.duration/sample_rate: must be positive (rate >= 1000)")
        if not 1 <= self.words[0] <= self.words[1]:
            raise ValidationError("synth.words: need 1 <= min <= max")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["priors"] = list(self.priors)
        d["words"] = list(self.words)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"synth: unknown fields {sorted(unknown)}")
        return cls(**d)


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Independent generator for a named stream and record index."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()), index)))


def allocate(n: int, priors) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to classes."""
    raw = np.asarray(priors, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _acoustic_latent(spec: SynthSpec, label: int, index: int) -> float:
    return spec.acoustic_strength * label + spec.noise * stream(spec.seed, "acoustic-latent", index).normal()


def _linguistic_latent(spec: SynthSpec, label: int, index: int) -> float:
    return spec.linguistic_strength * label + spec.noise * stream(spec.seed, "linguistic-latent", index).normal()


def pause_mean(latent: float) -> float:
    return float(np.clip(0.12 + 0.12 * latent, 0.04, 0.6))


def tone_pitch(latent: float) -> float:
    return float(np.clip(220.0 * 2.0 ** (-0.4 * latent), 90.0, 400.0))


def synth_audio(spec: SynthSpec, label: int, index: int) -> audio.Waveform:
    """Harmonic tone bursts separated by pauses, plus low-level noise."""
    rng = stream(spec.seed, "audio", index)
    latent = _acoustic_latent(spec, label, index)
    sr = spec.sample_rate
    n = int(round(spec.duration * sr))
    x = np.zeros(n)
    f0 = tone_pitch(latent)
    mean_pause = pause_mean(latent)
    t = float(rng.uniform(0.0, 0.2))
    while t < spec.duration:
        burst = float(rng.gamma(4.0, 0.3 / 4.0))
        a, b = int(t * sr), min(n, int((t + burst) * sr))
        if b > a:
            tt = np.arange(b - a) / sr
            pitch = f0 * (1.0 + 0.03 * rng.normal())
            tone = sum((0.6 / k) * np.sin(2 * np.pi * k * pitch * tt + rng.uniform(0, 2 * np.pi)) for k in (1, 2, 3))
            env = np.minimum(1.0, np.minimum(tt, tt[::-1]) / 0.01)
            x[a:b] += 0.5 * tone * env
        t += burst + float(rng.gamma(3.0, mean_pause / 3.0))
    x += 0.01 * rng.normal(size=n)
    return audio.Waveform(np.clip(x, -1.0, 1.0), sr)


def synth_transcript(spec: SynthSpec, label: int, index: int) -> str:
    rng = stream(spec.seed, "text", index)
    latent = _linguistic_latent(spec, label, index)
    # each marker token picks a class vocabulary with weight falling off around the latent
    affinity = np.exp(-2.0 * (np.arange(3) - latent) ** 2)
    marker_probs = affinity / affinity.sum()
    filler_rate = 0.04 + 0.06 * float(np.clip(latent, 0.0, 2.0))
    n_words = int(rng.integers(spec.words[0], spec.words[1] + 1))
    words = []
    for _ in range(n_words):
        u = rng.random()
        if u < filler_rate:
            words.append(FILLERS[rng.integers(len(FILLERS))])
        elif u < filler_rate + 0.2:
            markers = MARKER_WORDS[int(rng.choice(3, p=marker_probs))]
            words.append(markers[rng.integers(len(markers))])
        else:
            words.append(COMMON_WORDS[rng.integers(len(COMMON_WORDS))])
    return " ".join(words)


def synth_demographics(spec: SynthSpec, label: int, index: int) -> dict:
    rng = stream(spec.seed, "demographics", index)
    s = spec.demographic_strength
    bucket = label if rng.random() < s else int(rng.integers(3))
    lo, hi = AGE_RANGES[bucket]
    age = int(rng.integers(lo, hi + 1))
    edu_level = (3 - label) if rng.random() < s else int(rng.integers(4))
    education = EDUCATION_LEVELS[edu_level] if rng.random() >= spec.education_missing else None
    gender = GENDERS[int(rng.integers(2))]
    langs = sorted(spec.language_mix)
    language = langs[int(rng.choice(len(langs), p=[spec.language_mix[k] for k in langs]))]
    return {"age": age, "education": education, "gender": gender, "language": language}


def corpus_labels(spec: SynthSpec) -> list[int]:
    counts = allocate(spec.n_records, spec.priors)
    labels = np.concatenate([np.full(c, k) for k, c in enumerate(counts)]).astype(int)
    return stream(spec.seed, "labels").permutation(labels).tolist()


def generate(spec: SynthSpec, out_dir) -> list[ManifestRecord]:
    """Write WAVs plus ``manifest.jsonl`` and ``synth.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    records = []
    for i, label in enumerate(corpus_labels(spec)):
        uid = f"rec{i:05d}"
        wav_path = out / "audio" / f"{uid}.wav"
        audio.write_wav(wav_path, synth_audio(spec, label, i))
        demo = synth_demographics(spec, label, i)
        records.append(ManifestRecord(uid=uid, transcript=synth_transcript(spec, label, i), audio_path=str(wav_path),
                                      label=LABELS[label], **demo))
    write_manifest(out / "manifest.jsonl", records)
    (out / "synth.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")
    return records


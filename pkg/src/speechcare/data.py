"""Manifest records, demographic preparation and stratified splitting."""
from __future__ import annotations

import dataclasses
import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from speechcare.errors import ImputationError, StateError, ValidationError

LABELS = ("control", "mci", "ad")
AGE_BUCKETS = ("midlife_46_65", "older_66_80", "elderly_over_80")
GENDERS = ("female", "male")
EDUCATION_LEVELS = ("none_elementary", "high_school", "technical_undergrad", "advanced_graduate")
LANGUAGES = ("english", "spanish", "mandarin", "other")

DEMOGRAPHIC_WIDTH = len(AGE_BUCKETS) + len(GENDERS) + len(EDUCATION_LEVELS)
# representative age written back when an age bucket had to be imputed
BUCKET_AGE = {0: 56, 1: 73, 2: 85}


@dataclass(frozen=True)
class ManifestRecord:
    uid: str
    gender: str
    language: str
    transcript: str = ""
    audio_path: str | None = None
    embedding_path: str | None = None
    age: float | None = None
    education: str | None = None
    label: str | None = None
    augment: bool = False

    def __post_init__(self):
        if not self.audio_path and not self.embedding_path:
            raise ValidationError(f"{self.uid}: needs audio_path or embedding_path")
        if self.age is not None and not 18 <= self.age <= 120:
            raise ValidationError(f"{self.uid}: age {self.age} outside [18, 120]")
        if self.gender not in GENDERS:
            raise ValidationError(f"{self.uid}: unknown gender {self.gender!r}")
        if self.language not in LANGUAGES:
            raise ValidationError(f"{self.uid}: unknown language {self.language!r}")
        if self.education is not None and self.education not in EDUCATION_LEVELS:
            raise ValidationError(f"{self.uid}: unknown education {self.education!r}")
        if self.label is not None and self.label not in LABELS:
            raise ValidationError(f"{self.uid}: unknown label {self.label!r}")

    @property
    def label_index(self) -> int:
        if self.label is None:
            raise ValidationError(f"{self.uid}: record has no label")
        return LABELS.index(self.label)

    @property
    def age_bucket(self) -> str:
        if self.age is None:
            raise ValidationError(f"{self.uid}: age missing")
        return bucket_age(self.age)

    def groups(self) -> dict[str, str]:
        return {
            "age_bucket": bucket_age(self.age) if self.age is not None else "unknown",
            "gender": self.gender,
            "education": self.education or "unknown",
            "language": self.language,
        }

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        if not d["augment"]:
            del d["augment"]
        return d


_FIELDS = {f.name for f in dataclasses.fields(ManifestRecord)}


def record_from_dict(obj: dict) -> ManifestRecord:
    known = {k: v for k, v in obj.items() if k in _FIELDS}
    if "uid" not in known:
        raise ValidationError("manifest line without uid")
    known["uid"] = str(known["uid"])
    try:
        return ManifestRecord(**known)
    except TypeError as exc:
        raise ValidationError(f"{known['uid']}: {exc}") from exc


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    base = Path(path).parent
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            for key in ("audio_path", "embedding_path"):
                if obj.get(key) and not Path(obj[key]).is_absolute():
                    obj[key] = str(base / obj[key])
            records.append(record_from_dict(obj))
    return records


def write_manifest(path, records: Iterable[ManifestRecord], relative_to=None) -> None:
    base = Path(relative_to) if relative_to else Path(path).parent
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            d = rec.to_json()
            for key in ("audio_path", "embedding_path"):
                if d.get(key):
                    d[key] = Path(os.path.relpath(Path(d[key]).resolve(), base.resolve())).as_posix()
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def bucket_age(age: float) -> str:
    """Map an age in years to its band; 80 stays in the 66-80 band."""
    if age is None or not 18 <= age <= 120:
        raise ValidationError(f"age {age} outside [18, 120]")
    if age <= 65:
        return AGE_BUCKETS[0]
    if age <= 80:
        return AGE_BUCKETS[1]
    return AGE_BUCKETS[2]


# ------------------------------------------------------------------ imputation

def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def _one_hot(codes: Sequence[int], width: int) -> np.ndarray:
    out = np.zeros((len(codes), width))
    out[np.arange(len(codes)), codes] = 1.0
    return out


def impute_education(records: Sequence[ManifestRecord], seed: int = 0, max_rounds: int = 10,
                     tol: float = 1e-6) -> list[ManifestRecord]:
    """Fill missing education (and age band) by round-robin least-squares regression.

    Education is ordinal-coded 0-3 and regressed on one-hot age band, gender
    and language; missing age bands are regressed on gender, language and
    education. Predictions are rounded half-up and clamped. Missing values
    start at the observed mode and the rounds repeat until no imputed value
    moves by more than ``tol`` or ``max_rounds`` is reached. Observed values
    are never touched.
    """
    records = list(records)
    edu_missing = np.array([r.education is None for r in records])
    age_missing = np.array([r.age is None for r in records])
    if not edu_missing.any() and not age_missing.any():
        return records
    n_obs = int((~edu_missing).sum())
    if n_obs == 0:
        raise ImputationError("education missing for every record")
    if n_obs < 10:
        raise ImputationError(f"need >= 10 records with observed education, got {n_obs}")
    if age_missing.all():
        raise ImputationError("age missing for every record")

    rng = np.random.default_rng(seed)
    edu = np.array([EDUCATION_LEVELS.index(r.education) if r.education else -1 for r in records], float)
    age = np.array([AGE_BUCKETS.index(bucket_age(r.age)) if r.age is not None else -1 for r in records], float)
    gender = _one_hot([GENDERS.index(r.gender) for r in records], len(GENDERS))
    language = _one_hot([LANGUAGES.index(r.language) for r in records], len(LANGUAGES))

    def mode(values, mask):
        counts = np.bincount(values[~mask].astype(int))
        return float(np.flatnonzero(counts == counts.max())[0])

    edu[edu_missing] = mode(edu, edu_missing)
    age[age_missing] = mode(age, age_missing)

    def fit_predict(target, mask, design, top):
        coef, *_ = np.linalg.lstsq(design[~mask], target[~mask], rcond=None)
        return np.clip(_round_half_up(design[mask] @ coef), 0, top)

    # visiting order is the only stochastic choice in the round robin
    columns = [c for c, m in (("education", edu_missing), ("age", age_missing)) if m.any()]
    rng.shuffle(columns)
    for _ in range(max_rounds):
        change = 0.0
        for col in columns:
            if col == "education":
                design = np.hstack([_one_hot(age.astype(int), len(AGE_BUCKETS)), gender, language])
                new = fit_predict(edu, edu_missing, design, len(EDUCATION_LEVELS) - 1)
                change = max(change, float(np.abs(new - edu[edu_missing]).max()))
                edu[edu_missing] = new
            else:
                design = np.hstack([gender, language, _one_hot(edu.astype(int), len(EDUCATION_LEVELS))])
                new = fit_predict(age, age_missing, design, len(AGE_BUCKETS) - 1)
                change = max(change, float(np.abs(new - age[age_missing]).max()))
                age[age_missing] = new
        if change < tol:
            break

    out = []
    for i, r in enumerate(records):
        updates = {}
        if edu_missing[i]:
            updates["education"] = EDUCATION_LEVELS[int(edu[i])]
        if age_missing[i]:
            updates["age"] = float(BUCKET_AGE[int(age[i])])
        out.append(dataclasses.replace(r, **updates) if updates else r)
    return out


# --------------------------------------------------------------------- split

def stratum_key(record: ManifestRecord) -> tuple:
    return (record.label, record.language, record.age_bucket if record.age is not None else None,
            record.gender)


def split_strata(records: Sequence[ManifestRecord], min_size: int = 5) -> dict[tuple, list[ManifestRecord]]:
    """Group by label x language x age band x gender; small cells fold into label x language."""
    fine: dict[tuple, list[ManifestRecord]] = defaultdict(list)
    for r in records:
        fine[stratum_key(r)].append(r)
    strata: dict[tuple, list[ManifestRecord]] = defaultdict(list)
    for key, members in fine.items():
        if len(members) < min_size:
            strata[(key[0], key[1], "*", "*")].extend(members)
        else:
            strata[key].extend(members)
    return dict(strata)


def validation_count(n: int, fraction: float) -> int:
    return int(math.floor(fraction * n + 0.5))


def stratified_split(records: Sequence[ManifestRecord], fraction: float = 0.2, seed: int = 0,
                     min_stratum: int = 5) -> dict[str, str]:
    """Assign every uid to ``train`` or ``validation``, stratum by stratum."""
    if not records:
        raise ValidationError("cannot split an empty record list")
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"fraction must lie in (0, 1), got {fraction}")
    uids = [r.uid for r in records]
    if len(set(uids)) != len(uids):
        raise ValidationError("duplicate uids in manifest")
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    strata = split_strata(records, min_stratum)
    for key in sorted(strata, key=repr):
        members = sorted(strata[key], key=lambda r: r.uid)
        order = rng.permutation(len(members))
        k = validation_count(len(members), fraction)
        for rank, idx in enumerate(order):
            assignment[members[idx].uid] = "validation" if rank < k else "train"
    return {uid: assignment[uid] for uid in uids}


# ---------------------------------------------------------------- encoding

def encode_demographics(record: ManifestRecord) -> np.ndarray:
    """Width-9 one-hot: age band (3) | gender (2) | education (4)."""
    if record.education is None:
        raise StateError(f"{record.uid}: education still missing; run imputation first")
    vec = np.zeros(DEMOGRAPHIC_WIDTH)
    vec[AGE_BUCKETS.index(record.age_bucket)] = 1.0
    vec[len(AGE_BUCKETS) + GENDERS.index(record.gender)] = 1.0
    vec[len(AGE_BUCKETS) + len(GENDERS) + EDUCATION_LEVELS.index(record.education)] = 1.0
    return vec


def decode_demographics(vec: np.ndarray) -> tuple[str, str, str]:
    vec = np.asarray(vec)
    a, g = len(AGE_BUCKETS), len(GENDERS)
    return (AGE_BUCKETS[int(np.argmax(vec[:a]))], GENDERS[int(np.argmax(vec[a:a + g]))],
            EDUCATION_LEVELS[int(np.argmax(vec[a + g:]))])

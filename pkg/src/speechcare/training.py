"""Losses, optimizer, the training loop, oversampling and run comparison."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from speechcare.data import LABELS, ManifestRecord
from speechcare.errors import DomainError, NumericError, ValidationError
from speechcare.nn import autodiff as ad
from speechcare.nn.autodiff import Parameter, Tensor

log = logging.getLogger(__name__)

LOSSES = ("cross_entropy", "focal", "reweighted")
OPTIMIZERS = ("adamw", "gd")


# ------------------------------------------------------------------ losses

def _check_probs(probabilities, label) -> np.ndarray:
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1 or abs(p.sum() - 1.0) > 1e-6:
        raise DomainError("probabilities must be one vector summing to 1")
    if isinstance(label, str):
        if label not in LABELS:
            raise DomainError(f"unknown label {label!r}")
        label = LABELS.index(label)
    if not isinstance(label, (int, np.integer)) or not 0 <= label < len(p):
        raise DomainError(f"label index {label!r} out of range")
    return p, int(label)


def cross_entropy_loss(probabilities, label) -> float:
    p, y = _check_probs(probabilities, label)
    return float(-math.log(max(p[y], 1e-15)))


def focal_loss(probabilities, label, gamma: float = 2.0, alpha: float = 1.0) -> float:
    """-alpha (1 - p_t)^gamma log p_t."""
    if gamma < 0:
        raise DomainError("gamma must be >= 0")
    if not 0 < alpha <= 1:
        raise DomainError("alpha must lie in (0, 1]")
    p, y = _check_probs(probabilities, label)
    pt = max(p[y], 1e-15)
    return float(-alpha * (1.0 - pt) ** gamma * math.log(pt))


# ------------------------------------------------------------ config / result

@dataclass
class TrainConfig:
    lr_acoustic: float = 1e-5
    lr_text: float = 1e-6
    lr_other: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 4
    dropout: float = 0.1
    hidden: int = 128
    epochs: int = 20
    seed: int = 0
    loss: str = "cross_entropy"
    focal_gamma: float = 2.0
    focal_alpha: tuple[float, ...] = (1.0, 1.0, 1.0)
    class_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    early_stop_patience: int = 5
    optimizer: str = "adamw"

    def __post_init__(self):
        self.focal_alpha = tuple(float(a) for a in self.focal_alpha)
        self.class_weights = tuple(float(w) for w in self.class_weights)
        for name in ("lr_acoustic", "lr_text", "lr_other"):
            if getattr(self, name) < 0:
                raise ValidationError(f"train.{name}: learning rates must be non-negative")
        if self.weight_decay < 0:
            raise ValidationError("train.weight_decay: must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("train.batch_size: must be >= 1")
        if self.epochs < 1:
            raise ValidationError("train.epochs: must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValidationError("train.dropout: must lie in [0, 1)")
        if self.loss not in LOSSES:
            raise ValidationError(f"train.loss: expected one of {LOSSES}, got {self.loss!r}")
        if self.focal_gamma < 0:
            raise ValidationError("train.focal_gamma: must be >= 0")
        if len(self.focal_alpha) != len(LABELS) or any(not 0 < a <= 1 for a in self.focal_alpha):
            raise ValidationError("train.focal_alpha: three values in (0, 1]")
        if len(self.class_weights) != len(LABELS) or any(w <= 0 for w in self.class_weights):
            raise ValidationError("train.class_weights: three positive values")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"train.optimizer: expected one of {OPTIMIZERS}")
        if self.early_stop_patience < 1:
            raise ValidationError("train.early_stop_patience: must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["focal_alpha"] = list(self.focal_alpha)
        d["class_weights"] = list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"train: unknown fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunResult:
    seed: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    best_epoch: int = -1
    stopped_early: bool = False
    checkpoint_path: str | None = None

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["epochs_run"] = self.epochs_run
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        d = {k: v for k, v in d.items() if k != "epochs_run"}
        return cls(**d)


# -------------------------------------------------------------- graph losses

def batch_loss(logits: Tensor, labels: np.ndarray, config: TrainConfig) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    dtype = logits.dtype
    if config.loss == "cross_entropy":
        return ad.cross_entropy_logits(logits, labels)
    if config.loss == "reweighted":
        w = np.asarray(config.class_weights, dtype=np.float64)[labels]
        return ad.cross_entropy_logits(logits, labels, (w * len(w) / w.sum()).astype(dtype))
    logp = ad.getitem(ad.log_softmax(logits, axis=-1), (np.arange(len(labels)), labels))
    alpha = np.asarray(config.focal_alpha, dtype=np.float64)[labels].astype(dtype)
    if config.focal_gamma == 0:
        per = ad.mul(logp, alpha)
    else:
        # tiny offset keeps the gradient finite when p_t rounds to 1 and gamma < 1
        one_minus = ad.add(ad.neg(ad.exp(logp)), dtype.type(1.0 + 1e-12))
        per = ad.mul(ad.mul(ad.power(one_minus, config.focal_gamma), logp), alpha)
    return ad.scale(ad.sum(per), -1.0 / len(labels))


# --------------------------------------------------------------- optimizer

class Optimizer:
    """Decoupled weight decay with per-parameter learning rates.

    ``gd``: p <- p (1 - lr wd) - lr g.
    ``adamw``: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
    With a zero gradient both reduce to p (1 - lr wd) exactly.
    """

    def __init__(self, params: dict[str, Parameter], lrs: dict[str, float], weight_decay: float,
                 method: str = "adamw", betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if method not in OPTIMIZERS:
            raise ValidationError(f"unknown optimizer {method!r}")
        self.params = params
        self.lrs = lrs
        self.weight_decay = weight_decay
        self.method = method
        self.betas = betas
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in params.items()} if method == "adamw" else {}
        self._v = {n: np.zeros_like(p.data) for n, p in params.items()} if method == "adamw" else {}

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.betas
        for name, p in self.params.items():
            lr = self.lrs[name]
            g = grads[name]
            decayed = p.data * (1 - lr * self.weight_decay)
            if self.method == "gd":
                p.data = decayed - (lr * g).astype(p.dtype)
                continue
            m = self._m[name] = b1 * self._m[name] + (1 - b1) * g
            v = self._v[name] = b2 * self._v[name] + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data = decayed - (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def learning_rates(model, params: dict[str, Parameter], config: TrainConfig) -> dict[str, float]:
    table = {"acoustic": config.lr_acoustic, "text": config.lr_text, "other": config.lr_other}
    group = getattr(model, "parameter_group", lambda name: "other")
    return {name: table[group(name)] for name in params}


# ------------------------------------------------------------ training loop

def softmax_rows(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict(model, examples: Sequence, collate: Callable, batch_size: int = 16) -> np.ndarray:
    out = []
    for start in range(0, len(examples), batch_size):
        batch = collate(examples[start:start + batch_size])
        out.append(softmax_rows(model.forward(batch, training=False).logits.data))
    return np.concatenate(out, axis=0) if out else np.zeros((0, len(LABELS)))


def _mean_log_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = np.clip(probs[np.arange(len(labels)), labels], 1e-15, 1.0)
    return float(-np.mean(np.log(picked)))


def train(model, train_examples: Sequence, val_examples: Sequence, config: TrainConfig,
          collate: Callable, label_of: Callable = lambda ex: ex.label,
          evaluate: Callable[[np.ndarray, np.ndarray], dict] | None = None) -> RunResult:
    """Mini-batch training with seeded shuffling and best-validation-loss retention.

    ``collate`` turns a list of examples into a model batch; ``evaluate``
    maps (validation probabilities, labels) to a metrics dict.
    """
    if not train_examples:
        raise ValidationError("training split is empty")
    params = model.parameters(trainable_only=True)
    opt = Optimizer(params, learning_rates(model, params, config), config.weight_decay, config.optimizer)
    order_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    result = RunResult(seed=config.seed)
    val_labels = np.array([label_of(ex) for ex in val_examples], dtype=np.int64)
    best_loss, best_state, wait = math.inf, None, 0

    for epoch in range(config.epochs):
        order = order_rng.permutation(len(train_examples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_examples[i] for i in order[start:start + config.batch_size]]
            batch = collate(chunk)
            out = model.forward(batch, training=True, rng=drop_rng)
            loss = batch_loss(out.logits, batch.labels, config)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"loss became {value} at epoch {epoch + 1}, step {start // config.batch_size + 1}")
            opt.step(ad.backward(loss, params))
            total += value * len(chunk)
            count += len(chunk)
        result.train_loss.append(total / count)

        if len(val_examples):
            probs = predict(model, val_examples, collate)
            vloss = _mean_log_loss(probs, val_labels)
            result.val_loss.append(vloss)
            log.info("epoch %d train %.4f val %.4f", epoch + 1, result.train_loss[-1], vloss)
            if vloss < best_loss:
                best_loss, best_state, wait = vloss, model.state_dict(), 0
                result.best_epoch = epoch
            else:
                wait += 1
                if wait >= config.early_stop_patience:
                    result.stopped_early = True
                    break
        else:
            result.best_epoch = epoch

    if best_state is not None:
        model.load_state_dict(best_state)
    if len(val_examples) and evaluate is not None:
        result.metrics = evaluate(predict(model, val_examples, collate), val_labels)
    return result


# ------------------------------------------------------------- oversampling

def oversample(records: Sequence[ManifestRecord], key: Callable[[ManifestRecord], str] | str, seed: int = 0,
               groups: Sequence[str] | None = None) -> list[ManifestRecord]:
    """Duplicate minority-group records until every group matches the largest.

    Duplicates get a derived uid and ``augment=True`` so the loader applies
    frequency masking to them. Listed ``groups`` with no records are skipped.
    """
    keyfn = (lambda r: str(r.groups()[key])) if isinstance(key, str) else key
    by_group: dict[str, list[ManifestRecord]] = {}
    for r in records:
        by_group.setdefault(keyfn(r), []).append(r)
    for g in groups or ():
        if g not in by_group:
            warnings.warn(f"group {g!r} has no records; cannot oversample it", stacklevel=2)
    if not by_group:
        return []
    target = max(len(v) for v in by_group.values())
    out = list(records)
    for gi, g in enumerate(sorted(by_group)):
        members = by_group[g]
        need = target - len(members)
        if need <= 0:
            continue
        rng = np.random.default_rng([seed, 7, gi])
        picks = np.concatenate([rng.permutation(len(members)) for _ in range(need // len(members) + 1)])[:need]
        for j, idx in enumerate(picks):
            src = members[int(idx)]
            out.append(dataclasses.replace(src, uid=f"{src.uid}#dup{j}", augment=True))
    return out


# --------------------------------------------------------- run statistics

def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-15) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def regularized_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) by continued fraction."""
    if not 0.0 <= x <= 1.0:
        raise DomainError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: int) -> float:
    if math.isinf(t):
        return 0.0
    return regularized_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class Comparison:
    t: float
    p: float
    cohens_d: float
    mean_diff: float
    n: int
    tie: bool = False

    def to_dict(self) -> dict:
        return {k: _json_number(v) for k, v in dataclasses.asdict(self).items()}


def _json_number(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def _metric_values(results: Sequence, metric: str) -> np.ndarray:
    return np.array([r.metrics[metric] if isinstance(r, RunResult) else float(r) for r in results], dtype=np.float64)


def compare_runs(results_a: Sequence, results_b: Sequence, metric: str = "auc_micro") -> Comparison:
    """Paired t-test and Cohen's d on seed-paired metric differences (a - b).

    Zero-variance differences give the tie sentinel: ``tie=True``, p = NaN,
    d = +/-inf when the mean difference is non-zero and 0 otherwise.
    """
    a, b = _metric_values(results_a, metric), _metric_values(results_b, metric)
    if len(a) != len(b) or len(a) < 2:
        raise ValidationError("compare_runs needs two equal-length result lists of length >= 2")
    diff = a - b
    n = len(diff)
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        d = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        return Comparison(d, math.nan, d, mean, n, tie=True)
    t = mean / (sd / math.sqrt(n))
    return Comparison(t, t_two_sided_p(t, n - 1), mean / sd, mean, n)


def summarize(results: Sequence, metric: str) -> tuple[float, float]:
    """Mean and unbiased standard deviation of a metric across seeds."""
    v = _metric_values(results, metric)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def label_histogram(records: Sequence[ManifestRecord], key: str) -> Counter:
    return Counter(str(r.groups()[key]) for r in records)

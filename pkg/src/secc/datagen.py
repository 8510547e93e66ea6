"""Synthetic open-set adaptation tasks and input perturbations.

Classes are isotropic Gaussian blobs. The target domain re-draws every class
from the same generator and pushes the draws through a shift operator
(rotation in the first two coordinates, translation, additive noise).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

UNLABELED = -1


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    domain: Domain
    _hidden_label: Optional[int] = field(default=None, repr=False, compare=False)

    def reveal_label(self) -> int:
        """True class id. Only evaluation code should call this on target samples."""
        if self.domain is Domain.SOURCE:
            return self.label
        return self._hidden_label


@dataclass(frozen=True)
class ClassPartition:
    known: tuple
    unknown_source: frozenset
    unknown_target: frozenset

    def __post_init__(self):
        k = set(self.known)
        if k & self.unknown_source or k & self.unknown_target or self.unknown_source & self.unknown_target:
            raise ValidationError("class partition sets must be pairwise disjoint")

    @property
    def n_known(self) -> int:
        return len(self.known)

    @property
    def n_total_classes(self) -> int:
        # known classes plus the single aggregated unknown class
        return self.n_known + 1

    @property
    def unknown_id(self) -> int:
        return self.n_known

    def eval_label(self, cls) -> np.ndarray:
        """Collapse every non-known class onto the shared unknown id."""
        cls = np.asarray(cls)
        known = np.isin(cls, np.asarray(self.known))
        return np.where(known, cls, self.unknown_id).astype(np.int64)

    train_label = eval_label


@dataclass(frozen=True)
class ShiftSpec:
    rotation_angle: float = 0.0  # degrees
    translation: tuple = ()
    noise_std: float = 0.0


@dataclass(frozen=True)
class GeneratorSpec:
    d: int = 2
    classes_known: int = 6
    classes_unk_src: int = 0
    classes_unk_tgt: int = 3
    samples_per_class: int = 50
    shift: ShiftSpec = ShiftSpec()
    class_sep: float = 4.0
    blob_std: float = 0.5
    # unknown-target : known-target sample ratio; None keeps every class at samples_per_class
    unknown_ratio: Optional[float] = None
    layout: str = "random"  # "random" or "ring"
    # random layout: box half-width in units of class_sep * sqrt-ish packing
    spread: float = 1.0

    def validate(self):
        if self.d < 2:
            raise ValidationError(f"d must be >= 2, got {self.d}")
        if self.classes_known < 1:
            raise ValidationError("classes_known must be >= 1")
        if self.classes_unk_src < 0 or self.classes_unk_tgt < 0:
            raise ValidationError("unknown class counts must be nonnegative")
        if self.samples_per_class < 2:
            raise ValidationError("samples_per_class must be >= 2")
        if self.blob_std < 0 or self.class_sep <= 0:
            raise ValidationError("blob_std must be >= 0 and class_sep > 0")
        if self.shift.noise_std < 0:
            raise ValidationError("shift.noise_std must be >= 0")
        if self.shift.translation and len(self.shift.translation) != self.d:
            raise ValidationError(f"shift.translation must have {self.d} entries")
        if self.layout not in ("ring", "random"):
            raise ValidationError(f"layout must be 'ring' or 'random', got {self.layout!r}")
        if self.unknown_ratio is not None and self.unknown_ratio <= 0:
            raise ValidationError("unknown_ratio must be positive")
        if not self.spread > 0:
            raise ValidationError("spread must be positive")

    @property
    def n_classes(self) -> int:
        return self.classes_known + self.classes_unk_src + self.classes_unk_tgt


def visda_preset(**overrides) -> GeneratorSpec:
    """Known-to-unknown target ratio fixed at 1:10."""
    base = dict(d=8, classes_known=12, classes_unk_src=3, classes_unk_tgt=6,
                samples_per_class=20, unknown_ratio=10.0)
    base.update(overrides)
    return GeneratorSpec(**base)


@dataclass
class OpenSetTask:
    source_features: np.ndarray
    source_labels: np.ndarray
    target_features: np.ndarray
    _target_labels: np.ndarray = field(repr=False)
    partition: ClassPartition
    seed: int
    d: int

    @property
    def source(self) -> list:
        return [Sample(f, int(y), Domain.SOURCE) for f, y in zip(self.source_features, self.source_labels)]

    @property
    def target(self) -> list:
        return [Sample(f, UNLABELED, Domain.TARGET, int(y))
                for f, y in zip(self.target_features, self._target_labels)]

    def reveal_target_labels(self) -> np.ndarray:
        """Ground truth for evaluation; the trainer never calls this."""
        return self._target_labels.copy()

    def equals(self, other: "OpenSetTask") -> bool:
        return (self.partition == other.partition and self.seed == other.seed
                and np.array_equal(self.source_features, other.source_features)
                and np.array_equal(self.source_labels, other.source_labels)
                and np.array_equal(self.target_features, other.target_features)
                and np.array_equal(self._target_labels, other._target_labels))


def _class_means(spec: GeneratorSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_classes
    if spec.layout == "random":
        # uniform in a box, rejecting draws closer than class_sep to an earlier mean
        half = spec.spread * spec.class_sep * max(1.0, n ** (1.0 / spec.d)) / 2
        means = []
        while len(means) < n:
            for _ in range(1000):
                m = rng.uniform(-half, half, size=spec.d)
                if all(np.linalg.norm(m - o) >= spec.class_sep for o in means):
                    break
            else:
                half *= 1.1
                continue
            means.append(m)
        return np.array(means)
    # Evenly spaced on a ring in the first two coordinates, slot order shuffled
    # so known and unknown classes interleave differently per seed.
    phase = rng.uniform(0, 2 * np.pi)
    slots = rng.permutation(n)
    angles = phase + 2 * np.pi * slots / n
    means = np.zeros((n, spec.d))
    means[:, 0] = spec.class_sep * np.cos(angles)
    means[:, 1] = spec.class_sep * np.sin(angles)
    if spec.d > 2:
        means[:, 2:] = rng.normal(0, spec.class_sep / 4, size=(n, spec.d - 2))
    return means


def apply_shift(x: np.ndarray, shift: ShiftSpec, rng: np.random.Generator) -> np.ndarray:
    out = np.array(x, dtype=np.float64, copy=True)
    theta = math.radians(shift.rotation_angle)
    c, s = math.cos(theta), math.sin(theta)
    x0, x1 = out[:, 0].copy(), out[:, 1].copy()
    out[:, 0] = c * x0 - s * x1
    out[:, 1] = s * x0 + c * x1
    if shift.translation:
        out += np.asarray(shift.translation, dtype=np.float64)
    if shift.noise_std > 0:
        out += rng.normal(0, shift.noise_std, size=out.shape)
    return out


def make_open_set_task(gen_spec: GeneratorSpec, seed: int) -> OpenSetTask:
    gen_spec.validate()
    rng = np.random.default_rng(seed)
    means = _class_means(gen_spec, rng)
    nk, us = gen_spec.classes_known, gen_spec.classes_unk_src
    known = tuple(range(nk))
    unk_src = tuple(range(nk, nk + us))
    unk_tgt = tuple(range(nk + us, gen_spec.n_classes))
    partition = ClassPartition(known, frozenset(unk_src), frozenset(unk_tgt))

    npc = gen_spec.samples_per_class
    n_unk_tgt = [npc] * len(unk_tgt)
    if gen_spec.unknown_ratio is not None and unk_tgt:
        total = int(round(gen_spec.unknown_ratio * nk * npc))
        q, r = divmod(total, len(unk_tgt))
        n_unk_tgt = [q + (i < r) for i in range(len(unk_tgt))]

    def draw(cls, n):
        return means[cls] + gen_spec.blob_std * rng.normal(size=(n, gen_spec.d))

    src_cls = known + unk_src
    xs = np.concatenate([draw(c, npc) for c in src_cls])
    ys = np.repeat(np.asarray(src_cls, dtype=np.int64), npc)

    tgt_counts = [npc] * nk + n_unk_tgt
    tgt_cls = known + unk_tgt
    xt_clean = np.concatenate([draw(c, n) for c, n in zip(tgt_cls, tgt_counts)])
    yt = np.repeat(np.asarray(tgt_cls, dtype=np.int64), tgt_counts)
    xt = apply_shift(xt_clean, gen_spec.shift, rng)
    return OpenSetTask(xs, ys, xt, yt, partition, seed, gen_spec.d)


@dataclass(frozen=True)
class AugConfig:
    noise_std: float = 0.0
    flip_prob: float = 0.0
    scale_jitter: float = 0.0

    def validate(self):
        vals = (self.noise_std, self.flip_prob, self.scale_jitter)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("augmentation parameters must be finite")
        if self.noise_std < 0 or self.scale_jitter < 0:
            raise ValidationError("noise_std and scale_jitter must be nonnegative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValidationError("flip_prob must lie in [0, 1]")


def perturb_features(x: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    """Vectorised perturbation of a (n, d) array; returns a new array."""
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    if cfg.noise_std > 0:
        out = out + rng.normal(0, cfg.noise_std, size=x.shape)
    if cfg.flip_prob > 0:
        flips = rng.random(x.shape) < cfg.flip_prob
        out = np.where(flips, -out, out)
    if cfg.scale_jitter > 0:
        lead = x.shape[:-1] + (1,) if x.ndim > 1 else (1,)
        out = out * rng.uniform(1 - cfg.scale_jitter, 1 + cfg.scale_jitter, size=lead)
    return out


def perturb(x: Sample, cfg: AugConfig, rng: np.random.Generator) -> Sample:
    feats = perturb_features(x.features, cfg, rng)
    return Sample(feats, x.label, x.domain, x._hidden_label)


def batches(dataset: Sequence, batch_size: int, rng: np.random.Generator) -> Iterator[list]:
    """One shuffled epoch over ``dataset``; the last batch may be short."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        return
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield [dataset[i] for i in order[start:start + batch_size]]


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list:
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def save_task(task: OpenSetTask, path, unlabeled_view: bool = False) -> None:
    """Write the text format. ``unlabeled_view`` hides target labels as -1."""
    p = task.partition
    lines = [f"{task.d} {p.n_known} {len(p.unknown_source)} {len(p.unknown_target)} {task.seed}"]
    for f, y in zip(task.source_features, task.source_labels):
        lines.append(" ".join([Domain.SOURCE.value, str(int(y))] + [format(v, ".17g") for v in f]))
    for f, y in zip(task.target_features, task._target_labels):
        lab = UNLABELED if unlabeled_view else int(y)
        lines.append(" ".join([Domain.TARGET.value, str(lab)] + [format(v, ".17g") for v in f]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_task(path) -> OpenSetTask:
    text = Path(path).read_text().split("\n")
    try:
        d, nk, us, ut, seed = (int(t) for t in text[0].split())
    except ValueError as exc:
        raise ValidationError(f"bad task header: {text[0]!r}") from exc
    known = tuple(range(nk))
    partition = ClassPartition(known, frozenset(range(nk, nk + us)), frozenset(range(nk + us, nk + us + ut)))
    xs, ys, xt, yt = [], [], [], []
    for ln, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != d + 2:
            raise ValidationError(f"line {ln}: expected {d + 2} fields, got {len(parts)}")
        feats = [float(t) for t in parts[2:]]
        if parts[0] == Domain.SOURCE.value:
            xs.append(feats)
            ys.append(int(parts[1]))
        elif parts[0] == Domain.TARGET.value:
            xt.append(feats)
            yt.append(int(parts[1]))
        else:
            raise ValidationError(f"line {ln}: unknown domain {parts[0]!r}")
    return OpenSetTask(np.asarray(xs, dtype=np.float64).reshape(-1, d), np.asarray(ys, dtype=np.int64),
                       np.asarray(xt, dtype=np.float64).reshape(-1, d), np.asarray(yt, dtype=np.int64),
                       partition, seed, d)

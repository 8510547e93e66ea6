"""SE-CC training loop: clustering setup, SGD on the student, EMA teacher."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import clustering as clu
from .datagen import AugConfig, OpenSetTask, ValidationError, batch_indices, perturb_features
from .eval import MetricsReport, Mode, evaluate_model
from .losses import LossBreakdown
from .network import (BackboneSpec, StudentParams, TeacherParams, ema_update, forward_student, init_student,
                      save_checkpoint, teacher_from_student)
from .objective import ObjectiveTerms, compute_objective

log = logging.getLogger(__name__)

AUTO = "auto"


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, terms: list):
        super().__init__(f"non-finite loss at step {step}: {', '.join(terms)}")
        self.step = step
        self.terms = terms


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 56
    epochs: int = 25
    ema_decay: float = 0.99
    momentum: float = 0.0
    rho: float = 10.0
    alpha: float = 1.0
    beta: float = 1e-3
    constraint_weight: float = 1.0
    K: Union[int, str] = AUTO
    k_min: int = 1
    k_max: int = 12
    gap_refs: int = 10
    kmeans_n_init: int = 3
    refresh_interval: int = 0
    checkpoint_interval: int = 0  # epochs; 0 = off
    cluster_features: str = "raw"  # "raw", "centered", "projection" or "rbf"
    projection_dim: int = 16
    use_se: bool = True
    use_cde: bool = True
    use_kl: bool = True
    use_mim: bool = True
    # None: infer from the task (unknown source classes present -> N-way head)
    unknown_source_present: Optional[bool] = None
    seed: int = 0
    aug: AugConfig = AugConfig(noise_std=0.1, flip_prob=0.0, scale_jitter=0.1)
    augment_source: bool = False
    hidden_widths: tuple = (64, 64)
    H: int = 2
    D0: int = 16
    M: int = 32
    D1: int = 16
    disc_hidden: int = 32
    eval_mode: Optional[str] = None
    threshold: float = 0.5

    def validate(self):
        if not self.lr > 0:
            raise ValidationError("train.lr must be positive")
        if self.batch_size < 1:
            raise ValidationError("train.batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("train.epochs must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValidationError("train.ema_decay must lie in [0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("train.momentum must lie in [0, 1)")
        if not self.rho > 0:
            raise ValidationError("train.rho must be positive")
        if self.K != AUTO and (not isinstance(self.K, int) or self.K < 1):
            raise ValidationError("train.K must be a positive integer or 'auto'")
        if self.refresh_interval < 0:
            raise ValidationError("train.refresh_interval must be >= 0")
        if self.checkpoint_interval < 0:
            raise ValidationError("train.checkpoint_interval must be >= 0")
        if self.cluster_features not in ("raw", "centered", "projection", "rbf"):
            raise ValidationError("train.cluster_features must be one of raw, centered, projection, rbf")
        if self.use_mim and self.batch_size < 2:
            raise ValidationError("train.batch_size must be >= 2 when use_mim is on")
        if self.eval_mode is not None:
            Mode(self.eval_mode)
        self.aug.validate()

    def terms(self) -> ObjectiveTerms:
        return ObjectiveTerms(self.use_se, self.use_cde, self.use_kl, self.use_mim, self.rho, self.alpha,
                              self.beta, self.constraint_weight)


@dataclass
class HistoryEntry:
    step: int
    losses: LossBreakdown
    metrics: Optional[MetricsReport] = None


@dataclass
class TrainState:
    student: StudentParams
    teacher: TeacherParams
    cluster_model: clu.ClusterModel
    p_tilde: np.ndarray
    centroid_cos: np.ndarray
    cluster_projection: Optional[np.ndarray]
    source_x: np.ndarray
    source_y: np.ndarray
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    velocity: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def serialize(self) -> bytes:
        """Stable byte dump of every tensor; used to compare states."""
        parts = [f"step {self.step} epoch {self.epoch} K {self.cluster_model.K}".encode()]
        for name, params in (("student", self.student), ("teacher", self.teacher)):
            for k in sorted(params.keys()):
                parts.append(f"{name}.{k}".encode() + params[k].tobytes())
        parts.append(self.cluster_model.centroids.tobytes())
        parts.append(self.p_tilde.tobytes())
        return b"\n".join(parts)


def _rbf_lift(x, anchors):
    # nonnegative kernel features; cosine between lifts behaves like a local similarity
    d2 = ((x[:, None, :] - anchors[None]) ** 2).sum(-1)
    a2 = ((anchors[:, None, :] - anchors[None]) ** 2).sum(-1)
    bw = np.median(a2[np.triu_indices(len(anchors), 1)]) / 4.0
    return np.exp(-d2 / (2.0 * bw))


def _cluster_features(x, cfg: TrainConfig, projection):
    if cfg.cluster_features == "centered":
        return x - x.mean(0)
    if cfg.cluster_features == "rbf":
        return _rbf_lift(x, projection)
    return x if projection is None else x @ projection


def setup(task: OpenSetTask, cfg: TrainConfig) -> TrainState:
    cfg.validate()
    ss = np.random.SeedSequence(cfg.seed)
    init_seed, cluster_seed, proj_seed, train_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(4))

    projection = None
    if cfg.cluster_features == "projection":
        projection = np.random.default_rng(proj_seed).normal(size=(task.d, cfg.projection_dim))
        projection /= np.sqrt(task.d)
    elif cfg.cluster_features == "rbf":
        n = len(task.target_features)
        if not 2 <= cfg.projection_dim <= n:
            raise ValidationError("train.projection_dim must be in [2, number of target samples] for rbf features")
        pick = np.random.default_rng(proj_seed).choice(n, cfg.projection_dim, replace=False)
        projection = task.target_features[np.sort(pick)].copy()
    feats = _cluster_features(task.target_features, cfg, projection)
    table = clu.FeatureTable.from_array(feats)
    if cfg.K == AUTO:
        K = clu.select_k_gap(table, cfg.k_min, min(cfg.k_max, len(table)), cfg.gap_refs, cluster_seed)
        log.info("gap statistic selected K=%d", K)
    else:
        K = int(cfg.K)
    model = clu.kmeans(table, K, cluster_seed, rho=cfg.rho, n_init=cfg.kmeans_n_init)

    part = task.partition
    unk_src = bool(part.unknown_source) if cfg.unknown_source_present is None else cfg.unknown_source_present
    if unk_src and not part.unknown_source:
        raise ValidationError("train.unknown_source_present is set but the task has no unknown source classes")
    if unk_src:
        sx, sy = task.source_features, part.train_label(task.source_labels)
        N = part.n_known + 1
    else:
        keep = np.isin(task.source_labels, np.asarray(part.known))
        sx, sy = task.source_features[keep], task.source_labels[keep]
        N = part.n_known

    spec = BackboneSpec(task.d, N, K, tuple(cfg.hidden_widths), cfg.H, cfg.D0, cfg.M, cfg.D1, cfg.disc_hidden)
    student = init_student(spec, init_seed)
    teacher = teacher_from_student(student)
    return TrainState(student, teacher, model, clu.inherent_distribution(feats, model),
                      clu.centroid_cosine_matrix(model), projection, sx, sy,
                      np.random.default_rng(train_seed))


def train_step(state: TrainState, src_idx, tgt_x, tgt_ids, cfg: TrainConfig, tgt_views=None) -> tuple:
    """One SGD step on the student followed by the EMA teacher update.

    ``tgt_views`` optionally supplies the (student, teacher) perturbed views;
    by default they are drawn from the state's random stream.
    """
    if tgt_views is None:
        xs_view = perturb_features(tgt_x, cfg.aug, state.rng)
        xt_view = perturb_features(tgt_x, cfg.aug, state.rng)
    else:
        xs_view, xt_view = tgt_views
    src_x = state.source_x[src_idx]
    if cfg.augment_source:
        src_x = perturb_features(src_x, cfg.aug, state.rng)
    # overflow is reported through the non-finite guard below, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
            parts, grads = compute_objective(state.student, state.teacher, src_x,
                                         state.source_y[src_idx], xs_view, xt_view, state.p_tilde[tgt_ids],
                                         state.centroid_cos, cfg.terms())
    bad = parts.non_finite_terms()
    if bad:
        raise NonFiniteLoss(state.step, bad)
    new = {}
    for k, w in state.student.items():
        g = grads[k]
        if cfg.momentum > 0:
            v = cfg.momentum * state.velocity.get(k, 0.0) + g
            state.velocity[k] = v
            g = v
        new[k] = w - cfg.lr * g
    state.student = StudentParams(state.student.spec, new)
    state.teacher = ema_update(state.teacher, state.student, cfg.ema_decay)
    state.step += 1
    state.history.append(HistoryEntry(state.step, parts))
    return state, parts


def target_pooled(state: TrainState, task: OpenSetTask) -> np.ndarray:
    return forward_student(state.student, task.target_features, with_cluster=False, with_mi=False).pooled


def refresh(state: TrainState, task: OpenSetTask, cfg: TrainConfig) -> None:
    """Re-cluster on learnt pooled target features and recompute supervision."""
    feats = target_pooled(state, task)
    seed = int(state.rng.integers(2 ** 31))
    state.cluster_model = clu.refresh_clusters(state.cluster_model, clu.FeatureTable.from_array(feats), seed,
                                               n_init=cfg.kmeans_n_init)
    state.cluster_projection = None
    state.p_tilde = clu.inherent_distribution(feats, state.cluster_model)
    state.centroid_cos = clu.centroid_cosine_matrix(state.cluster_model)


def evaluate(state: TrainState, task: OpenSetTask, cfg: TrainConfig) -> MetricsReport:
    mode = None if cfg.eval_mode is None else Mode(cfg.eval_mode)
    report, _, _ = evaluate_model(state.student, task.target_features, task.reveal_target_labels(),
                                  task.partition, mode, cfg.threshold)
    return report


def train(task: OpenSetTask, cfg: TrainConfig, state: Optional[TrainState] = None,
          checkpoint_dir=None) -> tuple:
    state = setup(task, cfg) if state is None else state
    n_src, n_tgt = len(state.source_y), len(task.target_features)
    report = evaluate(state, task, cfg)
    for epoch in range(cfg.epochs):
        src_batches = batch_indices(n_src, cfg.batch_size, state.rng)
        tgt_batches = batch_indices(n_tgt, cfg.batch_size, state.rng)
        if cfg.use_mim and n_tgt >= 2:
            # a trailing single-sample target batch has no negative pair
            if len(tgt_batches) > 1 and len(tgt_batches[-1]) < 2:
                tgt_batches[-2] = np.concatenate([tgt_batches[-2], tgt_batches[-1]])
                tgt_batches.pop()
        for i in range(max(len(src_batches), len(tgt_batches))):
            s_idx = src_batches[i % len(src_batches)]
            t_idx = tgt_batches[i % len(tgt_batches)]
            train_step(state, s_idx, task.target_features[t_idx], t_idx, cfg)
        state.epoch += 1
        if cfg.refresh_interval > 0 and state.epoch % cfg.refresh_interval == 0:
            refresh(state, task, cfg)
        report = evaluate(state, task, cfg)
        if checkpoint_dir is not None and cfg.checkpoint_interval > 0 \
                and state.epoch % cfg.checkpoint_interval == 0:
            save_checkpoints(state, checkpoint_dir)
        if state.history:
            state.history[-1].metrics = report
        log.debug("epoch %d: mean=%.4f overall=%.4f", state.epoch, report.mean, report.overall)
    return state, report


def save_checkpoints(state: TrainState, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.student, d / f"student_epoch{state.epoch}.txt")
    save_checkpoint(state.teacher, d / f"teacher_epoch{state.epoch}.txt")


def ablation_configs(base: TrainConfig) -> dict:
    """The cumulative CE -> KL -> MIM ladder, in table order."""
    return {
        "SE": replace(base, use_se=True, use_cde=False, use_kl=False, use_mim=False),
        "+CE": replace(base, use_se=True, use_cde=True, use_kl=False, use_mim=False),
        "+KL": replace(base, use_se=True, use_cde=True, use_kl=True, use_mim=False),
        "SE-CC": replace(base, use_se=True, use_cde=True, use_kl=True, use_mim=True),
    }


def source_only_config(base: TrainConfig) -> TrainConfig:
    return replace(base, use_se=False, use_cde=False, use_kl=False, use_mim=False)


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = LossBreakdown.columns()
    w.writerow(["step"] + cols)
    for h in history:
        d = h.losses.as_dict()
        w.writerow([h.step] + [format(d[c], ".17g") for c in cols])
    return buf.getvalue()


def read_history_csv(path) -> list:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        want = ["step"] + LossBreakdown.columns()
        if header != want:
            raise ValidationError(f"history header {header} != {want}")
        out = []
        for row in r:
            if not row:
                continue
            if len(row) != len(want):
                raise ValidationError(f"history row has {len(row)} fields, expected {len(want)}")
            vals = [float(v) for v in row[1:]]
            out.append(HistoryEntry(int(row[0]), LossBreakdown(*vals)))
        return out


def write_history(history, path) -> None:
    Path(path).write_text(history_csv(history))

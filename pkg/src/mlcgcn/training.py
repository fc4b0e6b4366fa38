"""Optimization loop: AdamW, mixup augmentation, cross-validated experiments,
and the ablation harness.

Every fold owns a private model, optimizer, and RNG streams derived from
(seed, fold index), so runs are bit-reproducible end to end and folds could
run concurrently without sharing state.
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, TrainingError
from .losses import BatchTargets, cross_entropy, group_loss, total_loss
from .metrics import FoldReport, compute_metrics, stratified_kfold
from .model import MLCGCN, ModelConfig
from .seeding import derive_rng, derive_seed

log = logging.getLogger("mlcgcn")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.001
    epochs: int = 300
    batch_size: int = 16
    mixup_alpha: float = 0.2
    alpha: float = 1.0
    seed: int = 0
    folds: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.weight_decay < 0 or self.mixup_alpha < 0:
            raise ConfigError("weight_decay and mixup_alpha must be >= 0")


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators for decoupled-weight-decay Adam."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        state = cls()
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adamw_step(params, state: OptimizerState, cfg: TrainConfig):
    """One optimizer step over all parameters, reading grads from `.grad`.

    Moments use bias correction; weight decay is decoupled from the adaptive
    update. A non-finite gradient aborts the step naming the parameter.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingError(f"step aborted: non-finite gradient in parameter {name!r}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        update = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        update += cfg.learning_rate * cfg.weight_decay * p.data
        p.data = p.data - update
        if not np.isfinite(p.data).all():
            raise TrainingError(f"parameter {name!r} became non-finite after update")


def mixup_batch(series_batch, targets: BatchTargets, mixup_alpha, rng):
    """Convex-combine the batch with a permuted copy of itself.

    One Beta(mixup_alpha, mixup_alpha) coefficient per batch mixes both the
    time series and the target rows; single-sample batches (or alpha 0) pass
    through untouched.
    """
    n = len(series_batch)
    if n < 2 or mixup_alpha <= 0:
        return list(series_batch), targets, 1.0
    lam = float(rng.beta(mixup_alpha, mixup_alpha))
    perm = rng.permutation(n)
    mixed_series = [
        lam * series_batch[i] + (1.0 - lam) * series_batch[perm[i]] for i in range(n)
    ]
    mixed_targets = BatchTargets(lam * targets.probs + (1.0 - lam) * targets.probs[perm])
    return mixed_series, mixed_targets, lam


def class_balanced_batches(labels, batch_size, rng):
    """Batch index lists that interleave classes round-robin after a shuffle."""
    labels = np.asarray(labels, dtype=int)
    queues = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        queues.append(list(idx))
    order = []
    while any(queues):
        for q in queues:
            if q:
                order.append(q.pop())
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def train_epoch(model: MLCGCN, samples, cfg: TrainConfig, opt: OptimizerState,
                rng_batches, rng_mixup, rng_dropout, epoch):
    """One pass over the data; returns mean CE / group / total loss.

    Per batch: mixup, forward every sample, assemble the composite loss,
    backward, AdamW step. The group term is skipped entirely when alpha is 0
    (reported as 0). A non-finite loss aborts the epoch naming the batch.
    """
    labels = [s.label for s in samples]
    batches = class_balanced_batches(labels, cfg.batch_size, rng_batches)
    classes = model.config.classes
    sums = np.zeros(3)
    count = 0
    for batch_no, batch in enumerate(batches):
        series = [samples[i].series for i in batch]
        targets = BatchTargets.from_labels([samples[i].label for i in batch], classes)
        series, targets, _lam = mixup_batch(series, targets, cfg.mixup_alpha, rng_mixup)
        with ad.recording():
            prob_rows = []
            graphs = []
            for s in series:
                probs, levels = model.predict(Tensor(s), training=True, rng=rng_dropout)
                prob_rows.append(probs)
                graphs.append(levels.adjacencies)
            probs_mat = ad.stack_rows(prob_rows)
            ce = cross_entropy(probs_mat, targets)
            if cfg.alpha > 0:
                grp = group_loss(graphs, targets.dominant, model.config.levels)
            else:
                grp = Tensor(0.0)
            loss = total_loss(ce, grp, cfg.alpha)
            if not np.isfinite(loss.data):
                raise TrainingError(f"epoch {epoch} aborted: non-finite loss in batch {batch_no}")
            ad.zero_grads(model.params)
            ad.backward(loss)
        adamw_step(model.params, opt, cfg)
        sums += (float(ce.data), float(grp.data), float(loss.data))
        count += 1
    means = sums / max(count, 1)
    return {"ce": means[0], "group": means[1], "total": means[2]}


def evaluate_model(model: MLCGCN, samples):
    """Inference probabilities [N x c] and truth labels for a sample list."""
    probs = np.stack([model.predict(Tensor(s.series))[0].data for s in samples])
    truth = np.array([s.label for s in samples], dtype=int)
    return probs, truth


def intra_group_dissimilarity(model: MLCGCN, samples):
    """Mean squared distance of generated graphs from their class means,
    measured over the whole sample list (no gradients involved).

    This is the same statistic the group loss optimizes, evaluated as a
    diagnostic regardless of the training alpha.
    """
    if not samples:
        raise ContractError("intra_group_dissimilarity on an empty sample list")
    per_sample = []
    labels = []
    for s in samples:
        _, levels = model.predict(Tensor(s.series))
        per_sample.append([a.data for a in levels.adjacencies])
        labels.append(s.label)
    labels = np.asarray(labels)
    k = model.config.levels
    total = 0.0
    for level in range(k):
        for cls in np.unique(labels):
            members = [per_sample[u][level] for u in np.flatnonzero(labels == cls)]
            if len(members) < 2:
                continue
            mu = np.mean(members, axis=0)
            total += sum(float(((m - mu) ** 2).sum()) for m in members) / len(members)
    return total / k


@dataclass
class FoldResult:
    report: "FoldReport"
    models: list
    histories: list
    splits: list


def run_cv(samples, model_cfg: ModelConfig, train_cfg: TrainConfig) -> FoldResult:
    """Stratified cross-validation: fresh seeded model per fold, full epoch
    budget, final-epoch metrics on the held-out split."""
    labels = [s.label for s in samples]
    splits = stratified_kfold(labels, train_cfg.folds, derive_seed(train_cfg.seed, "folds"))
    reports = []
    models = []
    histories = []
    for fold, (train_idx, test_idx) in enumerate(splits):
        if np.intersect1d(train_idx, test_idx).size:
            raise TrainingError(f"fold {fold}: train/test overlap")  # pragma: no cover
        train_samples = [samples[i] for i in train_idx]
        test_samples = [samples[i] for i in test_idx]
        model = MLCGCN(model_cfg, rng=derive_rng(train_cfg.seed, "init", fold))
        opt = OptimizerState.for_params(model.params)
        rng_batches = derive_rng(train_cfg.seed, "batches", fold)
        rng_mixup = derive_rng(train_cfg.seed, "mixup", fold)
        rng_dropout = derive_rng(train_cfg.seed, "dropout", fold)
        history = []
        for epoch in range(1, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            stats = train_epoch(
                model, train_samples, train_cfg, opt, rng_batches, rng_mixup, rng_dropout, epoch
            )
            stats["sec"] = time.perf_counter() - t0
            history.append(stats)
            log.info(
                "fold=%d epoch=%d ce=%.6f group=%.6f total=%.6f sec=%.2f",
                fold, epoch, stats["ce"], stats["group"], stats["total"], stats["sec"],
            )
        probs, truth = evaluate_model(model, test_samples)
        reports.append(compute_metrics(probs, truth))
        models.append(model)
        histories.append(history)
    return FoldResult(FoldReport(reports), models, histories, splits)


@dataclass
class AblationRow:
    name: str
    report: object  # FoldReport or None when the variant failed
    group_dissimilarity: float
    error: str = ""

    @property
    def failed(self):
        return self.report is None


TABLE_VARIANTS = [
    ("sfe+group", {"model.use_tfe": False}),
    ("tfe+group", {"model.use_sfe": False}),
    ("sfe+tfe", {"train.alpha": 0.0}),
    ("sfe", {"model.use_tfe": False, "train.alpha": 0.0}),
    ("tfe", {"model.use_sfe": False, "train.alpha": 0.0}),
    ("full", {}),
]


def _apply_deltas(model_cfg, train_cfg, deltas):
    model_kw = {}
    train_kw = {}
    for key, value in deltas.items():
        scope, _, name = key.partition(".")
        if scope == "model":
            model_kw[name] = value
        elif scope == "train":
            train_kw[name] = value
        else:
            raise ConfigError(f"unknown variant key {key!r}")
    return replace(model_cfg, **model_kw), replace(train_cfg, **train_kw)


def run_ablation(samples, model_cfg: ModelConfig, train_cfg: TrainConfig, variants=None):
    """Run a list of (name, config-delta) variants through run_cv.

    Each row yields a FoldReport plus the post-training intra-group
    dissimilarity averaged over folds (measured on each fold's training
    split, whether or not the group term was optimized). A variant with an
    invalid config is marked failed and the run continues.
    """
    if variants is None:
        variants = TABLE_VARIANTS
    rows = []
    for name, deltas in variants:
        try:
            m_cfg, t_cfg = _apply_deltas(model_cfg, train_cfg, deltas)
            result = run_cv(samples, m_cfg, t_cfg)
            dissim = float(
                np.mean(
                    [
                        intra_group_dissimilarity(model, [samples[i] for i in split[0]])
                        for model, split in zip(result.models, result.splits)
                    ]
                )
            )
            rows.append(AblationRow(name, result.report, dissim))
        except (ConfigError, TypeError) as exc:
            log.warning("variant %s failed: %s", name, exc)
            rows.append(AblationRow(name, None, float("nan"), error=str(exc)))
    return rows


def ablation_table(rows) -> str:
    """Comparison table: one line per variant, metrics as mean +/- std."""
    lines = ["variant,Acc,AUC,Spe,Sen,F1,group_dissimilarity"]
    for row in rows:
        if row.failed:
            lines.append(f"{row.name},failed: {row.error},,,,,")
            continue
        mean, std = row.report.mean(), row.report.std()
        cells = [f"{m}±{s}" for m, s in zip(mean.percent_cells(), std.percent_cells())]
        lines.append(",".join([row.name, *cells, f"{row.group_dissimilarity:.6f}"]))
    return "\n".join(lines) + "\n"

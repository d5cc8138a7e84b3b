"""RMSProp training loop, model selection, evaluation, and the ablation harness.

Training iterates shuffled patient-level batches, augments each sample from a
single seeded stream, minimizes the hybrid loss by reverse-mode gradients, and
tracks the checkpoint with the best validation DSC (Otsu-binarized final map
against the mask). Runs are fully determined by (config, seed, manifest) on a
single thread; resuming from a saved checkpoint restores parameters, optimizer
accumulators, and the RNG stream, so chunked runs match an uninterrupted one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arch import ArchConfig, Network, build_network, forward
from .checkpoint import Checkpoint, load_pretrained, network_from_checkpoint, snapshot_network
from .data import AugmentPolicy, ManifestEntry, SplitPlan, load_sample, random_augment
from .data.synth import Sample
from .errors import ConfigError, NumericalError, UsageError
from .loss import LossConfig, hybrid_loss
from .metrics import BinaryMask, MetricsReport, dsc_binary, confusion, score_pair
from .nn import GradTape, Tensor, backward
from .postproc import binarize, otsu_threshold

EVAL_BATCH = 8


@dataclass
class TrainConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-4
    lr_decay: float = 0.0
    batch_size: int = 2
    epochs: int = 1
    seed: int = 0
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def validate(self) -> None:
        self.arch.validate()
        self.loss.validate()
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not (0.0 <= self.lr_decay < 1.0):
            raise ConfigError("lr_decay must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


# ---------------------------------------------------------------------------
# RMSProp


@dataclass
class RMSPropState:
    v: np.ndarray  # running mean of squared gradients


def rmsprop_step(param: Tensor, grad: np.ndarray, state: RMSPropState,
                 lr: float, alpha: float = 0.9, eps: float = 1e-8) -> None:
    """v <- alpha*v + (1-alpha)*g^2; param <- param - lr*g/(sqrt(v) + eps)."""
    if grad.shape != param.data.shape:
        raise UsageError(f"gradient shape {grad.shape} != param {param.data.shape}")
    state.v[...] = alpha * state.v + (1.0 - alpha) * grad * grad
    param.data[...] = param.data - lr * grad / (np.sqrt(state.v) + eps)


class RMSProp:
    def __init__(self, params: dict[str, Tensor], alpha: float = 0.9,
                 eps: float = 1e-8):
        self.alpha = alpha
        self.eps = eps
        self.slots = [(name, p, RMSPropState(np.zeros_like(p.data)))
                      for name, p in params.items()]

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        for _, param, state in self.slots:
            g = grads.get(param)
            if g is None:
                g = np.zeros_like(param.data)
            rmsprop_step(param, g, state, lr, self.alpha, self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: state.v.copy() for name, _, state in self.slots}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, param, state in self.slots:
            if name in arrays and arrays[name].shape == state.v.shape:
                state.v[...] = arrays[name]


# ---------------------------------------------------------------------------
# Training


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_bce: float
    train_dice_term: float
    train_l2: float
    val_dsc: float


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[EpochStats]
    best_epoch: int


def _load_dataset(entries, base_dir) -> dict[str, Sample]:
    if not entries:
        raise UsageError("dataset manifest is empty")
    return {e.sample_id: load_sample(e, base_dir) for e in entries}


def _check_plan(plan: SplitPlan, ids: set[str]) -> None:
    unknown = [i for i in plan.all_ids() if i not in ids]
    if unknown:
        raise UsageError(f"split plan references unknown sample ids: {unknown[:5]}")
    if not plan.train:
        raise UsageError("split plan has an empty training set")


def _batched(seq, size):
    for lo in range(0, len(seq), size):
        yield seq[lo:lo + size]


def predict_probabilities(net: Network, images: np.ndarray) -> np.ndarray:
    """Eval-mode final probability maps for a stack of (H, W) images."""
    batch = np.asarray(images, dtype=np.float32)[:, None, :, :]
    out = forward(net, Tensor(batch), training=False)
    return out.final.data[:, 0]


def _validation_dsc(net: Network, samples: dict[str, Sample], ids) -> float:
    if not ids:
        return float("nan")
    scores = []
    for chunk in _batched(list(ids), EVAL_BATCH):
        maps = predict_probabilities(
            net, np.stack([samples[i].image for i in chunk]))
        for sid, prob in zip(chunk, maps):
            thr, _ = otsu_threshold(prob)
            pred = binarize(prob, thr)
            scores.append(dsc_binary(confusion(pred, samples[sid].mask)))
    return float(np.mean(scores))


def train(cfg: TrainConfig, entries: list[ManifestEntry], plan: SplitPlan,
          base_dir, resume: Checkpoint | None = None,
          init: Checkpoint | None = None) -> TrainResult:
    """Run the configured number of epochs and keep the best-validation model.

    ``init`` warm-starts matching parameters by name (the transfer-learning
    hook); ``resume`` strictly restores a previous run's full state and
    continues its epoch count and RNG stream.
    """
    cfg.validate()
    samples = _load_dataset(entries, base_dir)
    _check_plan(plan, set(samples))

    net = build_network(cfg.arch, seed=cfg.seed)
    optimizer = RMSProp(net.params)
    rng = np.random.default_rng(cfg.seed)
    start_epoch = 0
    if init is not None:
        load_pretrained(init, net, mode="by_name")
    if resume is not None:
        load_pretrained(resume, net, mode="strict")
        if resume.optimizer_v:
            optimizer.load_state_arrays(resume.optimizer_v)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch

    history: list[EpochStats] = []
    best_dsc = -np.inf
    best_epoch = -1
    best_tensors: dict[str, np.ndarray] | None = None

    for local_epoch in range(cfg.epochs):
        epoch = start_epoch + local_epoch
        lr = cfg.lr * (1.0 - cfg.lr_decay) ** epoch
        order = [plan.train[i] for i in rng.permutation(len(plan.train))]
        sums = {"total": 0.0, "bce": 0.0, "dice": 0.0, "l2": 0.0}
        seen = 0
        for batch_ids in _batched(order, cfg.batch_size):
            batch = [random_augment(samples[sid], rng, cfg.augment)
                     for sid in batch_ids]
            x = Tensor(np.stack([s.image for s in batch])[:, None])
            y = np.stack([s.mask for s in batch])[:, None].astype(np.float32)
            with GradTape() as tape:
                out = forward(net, x, training=True)
                breakdown = hybrid_loss(out, y, net, cfg.loss)
                grads = backward(tape, breakdown.tensor)
            if not np.isfinite(breakdown.total):
                raise NumericalError(f"loss diverged at epoch {epoch}")
            optimizer.step(grads, lr)
            n = len(batch_ids)
            sums["total"] += breakdown.total * n
            sums["bce"] += breakdown.bce * n
            sums["dice"] += breakdown.dice_term * n
            sums["l2"] += breakdown.l2 * n
            seen += n
        val_dsc = _validation_dsc(net, samples, plan.val)
        history.append(EpochStats(epoch=epoch,
                                  train_loss=sums["total"] / seen,
                                  train_bce=sums["bce"] / seen,
                                  train_dice_term=sums["dice"] / seen,
                                  train_l2=sums["l2"] / seen,
                                  val_dsc=val_dsc))
        if np.isfinite(val_dsc) and val_dsc > best_dsc:
            best_dsc = val_dsc
            best_epoch = epoch
            best_tensors = snapshot_network(net)

    final_epoch = start_epoch + cfg.epochs
    last = Checkpoint(arch=cfg.arch, tensors=snapshot_network(net),
                      epoch=final_epoch, rng_state=rng.bit_generator.state,
                      optimizer_v=optimizer.state_arrays())
    if best_tensors is None:  # no usable validation signal: keep the final state
        best_tensors, best_epoch = last.tensors, final_epoch
    best = Checkpoint(arch=cfg.arch, tensors=best_tensors, epoch=best_epoch)
    return TrainResult(best=best, last=last, history=history, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(model: Checkpoint | Network, entries: list[ManifestEntry], base_dir,
             model_name: str = "model", fold: int | None = None,
             oracle: bool = False) -> MetricsReport:
    """Eval-mode forward, per-image Otsu binarization, all five metrics.

    ``oracle=True`` scores the ground truth against itself (pipeline check).
    """
    if not entries:
        raise UsageError("evaluate: empty manifest subset")
    net = None
    if not oracle:
        net = model if isinstance(model, Network) else network_from_checkpoint(model)
    report = MetricsReport(model=model_name, fold=fold)
    for chunk in _batched(entries, EVAL_BATCH):
        samples = [load_sample(e, base_dir) for e in chunk]
        if oracle:
            preds = [s.mask for s in samples]
        else:
            maps = predict_probabilities(net, np.stack([s.image for s in samples]))
            preds = []
            for prob in maps:
                thr, _ = otsu_threshold(prob)
                preds.append(binarize(prob, thr))
        for entry, sample, pred in zip(chunk, samples, preds):
            report.rows.append(score_pair(
                entry.sample_id,
                BinaryMask(pred, sample.spacing),
                BinaryMask(sample.mask, sample.spacing)))
    return report


# ---------------------------------------------------------------------------
# Ablation harness


@dataclass
class AblationResult:
    labels: list[str]
    rows: list[dict]                 # per model: fold-averaged metric means
    series: dict[str, "np.ndarray"]  # metric -> (n_models, n_folds)
    reports: list[list[MetricsReport]]


SERIES_METRICS = ("dsc", "sn", "sp", "hd_mm", "asd_mm")


def run_ablation(configs: list[tuple[str, TrainConfig]],
                 entries: list[ManifestEntry], base_dir,
                 folds: list[SplitPlan]) -> AblationResult:
    """Train every config on every fold and tabulate fold-averaged metrics."""
    if len(configs) < 2:
        raise UsageError("ablation needs at least two configurations")
    if not folds:
        raise UsageError("ablation needs at least one fold")
    by_id = {e.sample_id: e for e in entries}
    labels = [label for label, _ in configs]
    if len(set(labels)) != len(labels):
        raise UsageError("ablation model labels must be unique")

    series = {m: np.full((len(configs), len(folds)), np.nan) for m in SERIES_METRICS}
    reports: list[list[MetricsReport]] = []
    rows: list[dict] = []
    for ci, (label, cfg) in enumerate(configs):
        fold_reports = []
        for fi, plan in enumerate(folds):
            result = train(cfg, entries, plan, base_dir)
            test_entries = [by_id[i] for i in plan.test]
            report = evaluate(result.best, test_entries, base_dir,
                              model_name=label, fold=plan.fold)
            fold_reports.append(report)
            agg = report.aggregate()
            for m in SERIES_METRICS:
                series[m][ci, fi] = agg[f"{m}_mean"]
        reports.append(fold_reports)
        row = {"model": label}
        for m in SERIES_METRICS:
            vals = series[m][ci]
            defined = vals[np.isfinite(vals)]
            row[m] = float(defined.mean()) if len(defined) else float("nan")
        rows.append(row)
    return AblationResult(labels=labels, rows=rows, series=series, reports=reports)

"""Training protocol: balanced sampling, AdamW, best-validation checkpointing.

One epoch draws as many pairs from the balanced sampler as the training
set holds, so epochs stay comparable under sampling with replacement.
Validation loss is computed with slope 1 and without the slope penalty,
which keeps model selection comparable between plain and noise-estimation
runs. The checkpoint returned is the parameter state at the epoch with the
lowest validation loss.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import labels, objective
from .errors import ConfigError, TrainingDiverged
from .model import AlphaTable, NaiveModel, SiameseModel
from .nn import EncoderConfig
from .optim import AdamW
from .pipeline import AugmentParams, Dataset, FoldSpec, augment_pair, \
    balanced_sampler, split_patientwise

HISTORY_COLUMNS = ("epoch", "train_loss", "train_bce_state", "train_bce_other",
                   "train_reg", "val_loss", "val_bce_state", "val_bce_other",
                   "sampled_better", "sampled_stable", "sampled_worse",
                   "sampled_other")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 60
    batch_size: int = 32
    lam: float = 0.15
    weight_decay: float = 1e-2
    seed: int = 0
    noise_estimation: bool = False
    alpha_lr: float | None = None     # slope-exponent learning rate; None -> lr
    augment: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.alpha_lr is not None and self.alpha_lr <= 0:
            raise ConfigError(f"alpha_lr must be positive, got {self.alpha_lr}")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class FoldResult:
    fold: int
    model: object                 # SiameseModel or NaiveModel, best-epoch state
    alpha_table: AlphaTable | None
    history: list                 # one dict per epoch, HISTORY_COLUMNS keys
    best_epoch: int
    best_val_loss: float
    config: TrainConfig


def _augmented_batch(dataset: Dataset, indices, params: AugmentParams | None,
                     rng: np.random.Generator):
    x1, x2 = dataset.pair_batch(indices)
    if params is None:
        return x1, x2
    for row in range(x1.shape[0]):
        a1, a2 = augment_pair(x1[row, 0], x2[row, 0], params, rng)
        x1[row, 0] = a1
        x2[row, 0] = a2
    return x1, x2


def _chunks(seq, size):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


def _siamese_val_loss(model: SiameseModel, dataset: Dataset, val_idx,
                      batch_size: int):
    """Validation objective with slope fixed at 1 and no slope penalty."""
    total = {"loss": 0.0, "bce_state": 0.0, "bce_other": 0.0}
    n = len(val_idx)
    for chunk in _chunks(val_idx, batch_size * 4):
        x1, x2 = dataset.pair_batch(chunk)
        pred = model.predict_pairs(x1, x2)
        y_state, mask, y_other = objective.encode_targets(dataset.labels_of(chunk))
        parts = objective.loss_parts(pred["prob_progression"], y_state, mask,
                                     pred["prob_other"], y_other,
                                     np.zeros(len(chunk)), 0.0)
        for key in total:
            total[key] += parts[key] * len(chunk)
    return {key: val / n for key, val in total.items()}


def _naive_val_loss(model: NaiveModel, dataset: Dataset, val_idx, batch_size: int):
    total = 0.0
    for chunk in _chunks(val_idx, batch_size * 4):
        x1, x2 = dataset.pair_batch(chunk)
        probs = model.predict_pairs(x1, x2)["probs"]
        idx = [labels.LABEL_TO_INDEX[l] for l in dataset.labels_of(chunk)]
        p = np.clip(probs[np.arange(len(chunk)), idx], 1e-12, None)
        total += float(-np.log(p).sum())
    return {"loss": total / len(val_idx), "bce_state": float("nan"),
            "bce_other": float("nan")}


def train_fold(dataset: Dataset, fold: FoldSpec, config: TrainConfig,
               encoder_config: EncoderConfig | None = None,
               kind: str = "siamese") -> FoldResult:
    """Train one cross-validation fold and return its best-epoch state."""
    if kind not in ("siamese", "naive"):
        raise ConfigError(f"unknown model kind {kind!r}")
    h, w = dataset.image_size
    if encoder_config is None:
        encoder_config = EncoderConfig(in_height=h, in_width=w)

    train_idx = dataset.indices_for_patients(fold.train_patients)
    val_idx = dataset.indices_for_patients(fold.val_patients)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ConfigError(f"fold {fold.fold}: empty train or validation set")
    train_labels = dataset.labels_of(train_idx)

    root = np.random.SeedSequence(config.seed)
    init_ss, sampler_ss, augment_ss = root.spawn(3)
    init_rng = np.random.default_rng(init_ss)
    sampler = balanced_sampler(train_labels, np.random.default_rng(sampler_ss))
    augment_rng = np.random.default_rng(augment_ss)

    if kind == "siamese":
        model = SiameseModel.init(encoder_config, init_rng)
    else:
        model = NaiveModel.init(encoder_config, init_rng)
    table_size = max(p.pair_id for p in dataset.pairs) + 1
    alpha = AlphaTable.zeros(table_size) if kind == "siamese" else None

    opt_params = dict(model.params)
    lr_overrides = {}
    learn_alpha = kind == "siamese" and config.noise_estimation
    if learn_alpha:
        opt_params["alpha"] = alpha.values
        if config.alpha_lr is not None:
            lr_overrides["alpha"] = config.alpha_lr
    opt = AdamW(opt_params, lr=config.lr, weight_decay=config.weight_decay,
                no_decay={"alpha"}, lr_overrides=lr_overrides)

    aug = AugmentParams(out_height=h, out_width=w) if config.augment else None
    n_train = len(train_idx)
    steps = (n_train + config.batch_size - 1) // config.batch_size

    history = []
    best_val = float("inf")
    best_epoch = -1
    best_params = None
    best_alpha = None

    for epoch in range(config.epochs):
        drawn = [next(sampler) for _ in range(n_train)]
        epoch_pairs = train_idx[drawn]
        sampled_counts = {name: 0 for name in labels.LABELS}
        for lbl in dataset.labels_of(epoch_pairs):
            sampled_counts[lbl] += 1

        sums = {"loss": 0.0, "bce_state": 0.0, "bce_other": 0.0, "reg": 0.0}
        for step, batch_idx in enumerate(_chunks(epoch_pairs, config.batch_size)):
            x1, x2 = _augmented_batch(dataset, batch_idx, aug, augment_rng)
            batch_labels = dataset.labels_of(batch_idx)
            if kind == "siamese":
                pair_ids = np.array([dataset.pairs[i].pair_id for i in batch_idx])
                y_state, mask, y_other = objective.encode_targets(batch_labels)
                alpha_batch = alpha.values[pair_ids] if learn_alpha \
                    else np.zeros(len(batch_idx))
                parts, grads = model.loss_and_grads(
                    x1, x2, y_state, mask, y_other, alpha_batch,
                    config.lam if learn_alpha else 0.0,
                    alpha_size=table_size, pair_ids=pair_ids)
            else:
                class_idx = np.array([labels.LABEL_TO_INDEX[l] for l in batch_labels])
                parts, grads = model.loss_and_grads(x1, x2, class_idx)
            if not np.isfinite(parts["loss"]):
                raise TrainingDiverged(epoch, step, parts["loss"])
            opt.step(grads)
            for key in sums:
                sums[key] += parts.get(key, 0.0) * len(batch_idx)

        if kind == "siamese":
            val = _siamese_val_loss(model, dataset, val_idx, config.batch_size)
        else:
            val = _naive_val_loss(model, dataset, val_idx, config.batch_size)
        if not np.isfinite(val["loss"]):
            raise TrainingDiverged(epoch, steps, val["loss"])

        history.append({
            "epoch": epoch,
            "train_loss": sums["loss"] / n_train,
            "train_bce_state": sums["bce_state"] / n_train,
            "train_bce_other": sums["bce_other"] / n_train,
            "train_reg": sums["reg"] / n_train,
            "val_loss": val["loss"],
            "val_bce_state": val["bce_state"],
            "val_bce_other": val["bce_other"],
            "sampled_better": sampled_counts[labels.BETTER],
            "sampled_stable": sampled_counts[labels.STABLE],
            "sampled_worse": sampled_counts[labels.WORSE],
            "sampled_other": sampled_counts[labels.OTHER],
        })

        if val["loss"] < best_val:
            best_val = val["loss"]
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
            best_alpha = alpha.values.copy() if alpha is not None else None

    # encoder.params shares these arrays, so one in-place write updates both
    for key, value in best_params.items():
        model.params[key][...] = value
    if alpha is not None:
        alpha.values[...] = best_alpha

    return FoldResult(fold=fold.fold, model=model, alpha_table=alpha,
                      history=history, best_epoch=best_epoch,
                      best_val_loss=best_val, config=config)


def mean_std(values) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def cross_validate(dataset: Dataset, config: TrainConfig, n_folds: int = 5,
                   holdout_frac: float = 0.15,
                   encoder_config: EncoderConfig | None = None,
                   kind: str = "siamese", plan=None):
    """Train every fold of a patient-wise split.

    Returns (plan, [FoldResult], summary) where summary holds per-fold best
    validation losses and their mean +/- population std. Per-fold seeds are
    derived from config.seed, so folds are reproducible independently of
    execution order.
    """
    if plan is None:
        plan = split_patientwise(dataset, n_folds=n_folds,
                                 holdout_frac=holdout_frac, seed=config.seed)
    fold_seeds = np.random.SeedSequence(config.seed).generate_state(
        plan.n_folds, dtype=np.uint64)
    results = []
    for i in range(plan.n_folds):
        fold_config = dataclasses.replace(config, seed=int(fold_seeds[i]))
        results.append(train_fold(dataset, plan.fold_spec(i), fold_config,
                                  encoder_config=encoder_config, kind=kind))
    losses = [r.best_val_loss for r in results]
    mean, std = mean_std(losses)
    summary = {"val_loss_per_fold": losses, "val_loss_mean": mean,
               "val_loss_std": std}
    return plan, results, summary


def write_history_csv(path, history_rows) -> None:
    """History as CSV; floats via repr so identical runs are byte-identical."""
    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history_rows:
            f.write(",".join(fmt(row[c]) for c in HISTORY_COLUMNS) + "\n")

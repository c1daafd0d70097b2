"""Optimization and training protocols.

Everything here is deterministic under a fixed seed: one generator drives
parameter init, batch order, masking, and augmentation in a fixed sequence,
so a rerun with the same config reproduces the loss series bitwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import CloudClassifier, MaskedAutoencoder
from .config import ModelConfig, TrainConfig
from .errors import ConfigError, NonFiniteError
from .geometry import PointCloud, build_scale_pyramid, mask_and_backproject, normalize_points
from .tensor import Tensor

__all__ = [
    "AdamW",
    "lr_at",
    "augment",
    "cross_entropy",
    "MetricsRow",
    "PretrainResult",
    "pretrain_run",
    "FinetuneResult",
    "finetune_classify",
    "FewShotResult",
    "few_shot_eval",
    "pooled_features",
]


class AdamW:
    """Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in {name!r}; step aborted")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def state_arrays(self) -> tuple[int, dict[str, np.ndarray], dict[str, np.ndarray]]:
        return self.t, self.m, self.v

    def load_state(self, t: int, m: dict[str, np.ndarray], v: dict[str, np.ndarray]) -> None:
        if set(m) != set(self.params) or set(v) != set(self.params):
            raise ConfigError("optimizer state names do not match the parameter set")
        for name, p in self.params.items():
            if m[name].shape != p.shape or v[name].shape != p.shape:
                raise ConfigError(f"optimizer state shape mismatch for {name!r}")
        self.t = int(t)
        self.m = {k: np.array(a, dtype=np.float64) for k, a in m.items()}
        self.v = {k: np.array(a, dtype=np.float64) for k, a in v.items()}


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to min_lr at the last epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside schedule of {cfg.epochs}")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    span = cfg.epochs - 1 - cfg.warmup_epochs
    if span <= 0:
        return cfg.base_lr
    progress = (epoch - cfg.warmup_epochs) / span
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def augment(points: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    """Random isotropic scale and per-axis translation: p <- s*p + t."""
    s = rng.uniform(cfg.scale_lo, cfg.scale_hi)
    t = rng.uniform(-cfg.translate, cfg.translate, size=3)
    return points * s + t


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over a (B, K) batch of logits."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ConfigError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"label outside [0, {k})")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    ls = T.log_softmax(logits, axis=-1)
    return T.mul(T.tsum(T.mul(ls, onehot)), -1.0 / b)


@dataclass
class MetricsRow:
    step: int
    epoch: int
    lr: float
    loss: float
    accuracy: float | None = None


def _prepare(points: np.ndarray, rng, model_cfg: ModelConfig, train_cfg: TrainConfig, do_augment: bool):
    if do_augment:
        points = augment(points, rng, train_cfg)
    points = normalize_points(points)
    return build_scale_pyramid(points, model_cfg.sizes, model_cfg.ks)


@dataclass
class PretrainResult:
    model: MaskedAutoencoder
    optimizer: AdamW
    rows: list[MetricsRow] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.rows]


def pretrain_run(
    clouds: list[PointCloud],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    on_checkpoint=None,
) -> PretrainResult:
    """The masked-reconstruction loop.

    `on_checkpoint(model, optimizer, step, tag)` is invoked at the end, every
    `checkpoint_every` epochs, and with tag "aborted" before re-raising if a
    non-finite value surfaces mid-training.
    """
    if not clouds:
        raise ConfigError("pretraining needs a non-empty dataset")
    if train_cfg.mask_ratio <= 0.0:
        raise ConfigError("pretraining needs mask_ratio > 0")
    rng = np.random.default_rng(train_cfg.seed)
    model = MaskedAutoencoder(model_cfg, rng)
    opt = AdamW(model.param_dict(), train_cfg.base_lr, train_cfg.weight_decay)
    result = PretrainResult(model, opt)
    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            lr = lr_at(epoch, train_cfg)
            opt.lr = lr
            order = rng.permutation(len(clouds))
            for lo in range(0, len(order), train_cfg.batch_size):
                batch = order[lo : lo + train_cfg.batch_size]
                opt.zero_grad()
                total = 0.0
                for ci in batch:
                    pyr = _prepare(clouds[ci].points, rng, model_cfg, train_cfg, train_cfg.augment)
                    plan = mask_and_backproject(pyr, train_cfg.mask_ratio, rng)
                    loss = model.loss(pyr, plan)
                    T.mul(loss, 1.0 / batch.size).backward()
                    total += loss.item()
                opt.step()
                step += 1
                result.rows.append(MetricsRow(step, epoch, lr, total / batch.size))
            if (
                on_checkpoint is not None
                and train_cfg.checkpoint_every
                and (epoch + 1) % train_cfg.checkpoint_every == 0
                and epoch + 1 < train_cfg.epochs
            ):
                on_checkpoint(model, opt, step, f"epoch{epoch + 1:04d}")
    except NonFiniteError:
        # parameters still hold the last completed step
        if on_checkpoint is not None:
            on_checkpoint(model, opt, step, "aborted")
        raise
    if on_checkpoint is not None:
        on_checkpoint(model, opt, step, "final")
    return result


def _stratified_split(
    labels: np.ndarray, holdout_fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; every class keeps at least one train item."""
    train: list[int] = []
    hold: list[int] = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_hold = min(int(np.floor(idx.size * holdout_fraction)), idx.size - 1)
        hold.extend(idx[:n_hold].tolist())
        train.extend(idx[n_hold:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(hold), dtype=np.int64)


def _batch_logits(clf: CloudClassifier, pyramids: list) -> Tensor:
    full_plans = [
        mask_and_backproject(p, 0.0, np.random.default_rng(0)) for p in pyramids
    ]
    return T.concat([clf.logits(p, plan) for p, plan in zip(pyramids, full_plans)], axis=0)


def pooled_features(clf: CloudClassifier, clouds: list[PointCloud], model_cfg: ModelConfig) -> np.ndarray:
    """Frozen-backbone feature matrix (n, 2*C_S); no augmentation, no grads."""
    rows = []
    with T.no_grad():
        for c in clouds:
            pyr = build_scale_pyramid(normalize_points(c.points), model_cfg.sizes, model_cfg.ks)
            plan = mask_and_backproject(pyr, 0.0, np.random.default_rng(0))
            rows.append(clf.features(pyr, plan).data[0])
    return np.stack(rows, axis=0)


@dataclass
class FinetuneResult:
    classifier: CloudClassifier
    train_accuracy: float
    holdout_accuracy: float
    rows: list[MetricsRow] = field(default_factory=list)
    train_idx: np.ndarray | None = None
    holdout_idx: np.ndarray | None = None


def _head_train_on_features(
    clf: CloudClassifier,
    feats: np.ndarray,
    labels: np.ndarray,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    rows: list[MetricsRow] | None = None,
) -> None:
    """Optimize only the head over a fixed feature matrix."""
    head_params = {
        name: p for name, p in clf.named_parameters() if name.startswith("head.")
    }
    opt = AdamW(head_params, train_cfg.base_lr, train_cfg.weight_decay)
    step = 0
    for epoch in range(train_cfg.epochs):
        opt.lr = lr_at(epoch, train_cfg)
        order = rng.permutation(labels.size)
        for lo in range(0, labels.size, train_cfg.batch_size):
            batch = order[lo : lo + train_cfg.batch_size]
            opt.zero_grad()
            logits = clf.logits_from_features(T.constant(feats[batch]))
            loss = cross_entropy(logits, labels[batch])
            loss.backward()
            opt.step()
            step += 1
            if rows is not None:
                acc = float(np.mean(np.argmax(logits.data, axis=1) == labels[batch]))
                rows.append(MetricsRow(step, epoch, opt.lr, loss.item(), acc))


def _eval_accuracy(clf, clouds, labels, model_cfg) -> float:
    feats = pooled_features(clf, clouds, model_cfg)
    with T.no_grad():
        logits = clf.logits_from_features(T.constant(feats)).data
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def finetune_classify(
    clouds: list[PointCloud],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    pretrained: dict[str, np.ndarray] | None = None,
) -> FinetuneResult:
    """Supervised classification with a stratified held-out split.

    `pretrained` maps parameter names to arrays (an autoencoder checkpoint);
    every name with an encoder prefix that exists in the classifier is
    copied in. With `freeze_backbone` only the head trains, on cached
    features; otherwise gradients flow through the whole encoder.
    """
    labels = np.array(
        [c.label if c.label is not None else -1 for c in clouds], dtype=np.int64
    )
    if labels.size == 0 or labels.min() < 0:
        raise ConfigError("fine-tuning needs a label on every cloud")
    n_classes = int(labels.max()) + 1
    if np.unique(labels).size < 2:
        raise ConfigError("fine-tuning needs at least two classes present")
    rng = np.random.default_rng(train_cfg.seed)
    clf = CloudClassifier(model_cfg, n_classes, train_cfg.head_hidden, rng)
    if pretrained is not None:
        load_encoder_weights(clf, pretrained)
    train_idx, hold_idx = _stratified_split(labels, train_cfg.holdout_fraction, rng)
    rows: list[MetricsRow] = []

    if train_cfg.freeze_backbone:
        feats = pooled_features(clf, [clouds[i] for i in train_idx], model_cfg)
        _head_train_on_features(clf, feats, labels[train_idx], train_cfg, rng, rows)
    else:
        opt = AdamW(clf.param_dict(), train_cfg.base_lr, train_cfg.weight_decay)
        step = 0
        for epoch in range(train_cfg.epochs):
            opt.lr = lr_at(epoch, train_cfg)
            order = rng.permutation(train_idx.size)
            for lo in range(0, train_idx.size, train_cfg.batch_size):
                batch = train_idx[order[lo : lo + train_cfg.batch_size]]
                opt.zero_grad()
                pyramids = [
                    _prepare(clouds[i].points, rng, model_cfg, train_cfg, train_cfg.augment)
                    for i in batch
                ]
                logits = _batch_logits(clf, pyramids)
                loss = cross_entropy(logits, labels[batch])
                loss.backward()
                opt.step()
                step += 1
                acc = float(np.mean(np.argmax(logits.data, axis=1) == labels[batch]))
                rows.append(MetricsRow(step, epoch, opt.lr, loss.item(), acc))

    train_acc = _eval_accuracy(clf, [clouds[i] for i in train_idx], labels[train_idx], model_cfg)
    hold_acc = (
        _eval_accuracy(clf, [clouds[i] for i in hold_idx], labels[hold_idx], model_cfg)
        if hold_idx.size
        else float("nan")
    )
    return FinetuneResult(clf, train_acc, hold_acc, rows, train_idx, hold_idx)


def load_encoder_weights(clf: CloudClassifier, params: dict[str, np.ndarray]) -> int:
    """Copy every encoder.* entry whose name and shape match; returns count."""
    own = clf.param_dict()
    copied = 0
    for name, value in params.items():
        if not name.startswith("encoder."):
            continue
        if name in own:
            if own[name].shape != value.shape:
                raise ConfigError(f"shape mismatch for {name!r}: {own[name].shape} vs {value.shape}")
            own[name].data = np.array(value, dtype=np.float64)
            copied += 1
    if copied == 0:
        raise ConfigError("checkpoint holds no matching encoder parameters")
    return copied


@dataclass
class FewShotResult:
    mean_accuracy: float
    std_accuracy: float
    per_trial: list[float]


def few_shot_eval(
    clouds: list[PointCloud],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    pretrained: dict[str, np.ndarray] | None = None,
) -> FewShotResult:
    """n-way m-shot protocol: per trial, train a fresh head on m examples of
    each of n sampled classes (frozen backbone) and test on `test_per_class`
    held-out examples per class."""
    n, m = train_cfg.n_way, train_cfg.m_shot
    per_class: dict[int, list[int]] = {}
    for i, c in enumerate(clouds):
        if c.label is None:
            raise ConfigError("few-shot needs a label on every cloud")
        per_class.setdefault(c.label, []).append(i)
    need = m + train_cfg.test_per_class
    eligible = [cls for cls, idx in per_class.items() if len(idx) >= need]
    if len(eligible) < n:
        raise ConfigError(
            f"need {n} classes with at least {need} clouds each, have {len(eligible)}"
        )
    rng = np.random.default_rng(train_cfg.seed)
    accs: list[float] = []
    for _ in range(train_cfg.trials):
        classes = rng.choice(np.array(sorted(eligible)), size=n, replace=False)
        train_set: list[int] = []
        test_set: list[int] = []
        remap = {int(cls): j for j, cls in enumerate(classes)}
        for cls in classes:
            pool = np.array(per_class[int(cls)])
            pool = pool[rng.permutation(pool.size)]
            train_set.extend(pool[:m].tolist())
            test_set.extend(pool[m : m + train_cfg.test_per_class].tolist())
        clf = CloudClassifier(model_cfg, n, train_cfg.head_hidden, rng)
        if pretrained is not None:
            load_encoder_weights(clf, pretrained)
        tr_labels = np.array([remap[clouds[i].label] for i in train_set], dtype=np.int64)
        te_labels = np.array([remap[clouds[i].label] for i in test_set], dtype=np.int64)
        feats = pooled_features(clf, [clouds[i] for i in train_set], model_cfg)
        _head_train_on_features(clf, feats, tr_labels, train_cfg, rng)
        accs.append(
            _eval_accuracy(clf, [clouds[i] for i in test_set], te_labels, model_cfg)
        )
    arr = np.array(accs)
    return FewShotResult(float(arr.mean()), float(arr.std()), accs)

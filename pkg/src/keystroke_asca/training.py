"""Data splitting, the Adam training loop with linear annealing, evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .errors import ConfigError, DataError, LabelError, ShapeError, StratifyError
from .features import AugmentConfig, MelConfig, apply_masks, draw_masks, featurize_batch, item_rng, standardize
from .isolation import SEGMENT_LEN
from .nn import functional as F
from .nn.model import Classifier, topk_from_logits

log = logging.getLogger(__name__)

_SHUFFLE_STREAM = 0x5A5A


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "random"
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("random", "stratified"):
            raise ConfigError(f"split mode must be 'random' or 'stratified', got {self.mode!r}")
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(not 0.0 < f < 1.0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions {fr} must each lie in (0, 1) and sum to 1")


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 1100
    batch_size: int = 16
    max_lr: float = 5e-4
    anneal: str = "linear"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    validate_every: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.validate_every < 1:
            raise ConfigError("epochs, batch_size and validate_every must be at least 1")
        if self.max_lr <= 0:
            raise ConfigError("max_lr must be positive")
        if self.anneal != "linear":
            raise ConfigError(f"unsupported annealing schedule {self.anneal!r}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    val_accuracy: dict = field(default_factory=dict)  # epoch -> accuracy
    peak_val_accuracy: float | None = None
    peak_epoch: int | None = None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
            for e, (loss, acc) in enumerate(zip(self.train_loss, self.train_accuracy)):
                val = self.val_accuracy.get(e)
                w.writerow([e, repr(float(loss)), repr(float(acc)), "" if val is None else repr(float(val))])


def split_dataset(labels, spec: SplitSpec):
    """Disjoint (train, val, test) index arrays covering every item.

    Stratified: each class contributes floor(fraction * count) items to val
    and test, the remainder to train.  Random: one seeded shuffle, then cuts
    at floor(fraction * n).
    """
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n = len(labels)
    rng = np.random.default_rng([spec.seed, 0x5B11])
    if spec.mode == "random":
        order = rng.permutation(n)
        n_val = int(math.floor(spec.val_fraction * n + 1e-9))
        n_test = int(math.floor(spec.test_fraction * n + 1e-9))
        test, val, train = order[:n_test], order[n_test : n_test + n_val], order[n_test + n_val :]
    else:
        train, val, test = [], [], []
        for c in np.unique(labels):
            idx = rng.permutation(np.flatnonzero(labels == c))
            n_val = int(math.floor(spec.val_fraction * len(idx) + 1e-9))
            n_test = int(math.floor(spec.test_fraction * len(idx) + 1e-9))
            if n_val < 1 or n_test < 1 or len(idx) - n_val - n_test < 1:
                raise StratifyError(f"class {c} has {len(idx)} items, too few for a stratified split")
            test.extend(idx[:n_test])
            val.extend(idx[n_test : n_test + n_val])
            train.extend(idx[n_test + n_val :])
        train, val, test = (np.array(sorted(s), dtype=np.int64) for s in (train, val, test))
    return np.sort(train), np.sort(val), np.sort(test)


def lr_at(epoch, cfg: RunConfig):
    """Linear decay from ``max_lr`` at epoch 0 toward 0 at ``epochs``."""
    return cfg.max_lr * (1.0 - epoch / cfg.epochs)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """In-place bias-corrected Adam update of the arrays in ``params``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


def _check_data(X, y, name, n_classes):
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64).ravel()
    if len(X) == 0:
        raise DataError(f"{name} split is empty")
    if len(X) != len(y):
        raise ShapeError(f"{name}: {len(X)} inputs but {len(y)} labels")
    if y.min() < 0 or y.max() >= n_classes:
        raise LabelError(f"{name} labels must lie in [0, {n_classes})")
    if X.ndim == 2 and X.shape[1] != SEGMENT_LEN:
        raise ShapeError(f"{name}: waveforms must have {SEGMENT_LEN} samples")
    if X.ndim not in (2, 3):
        raise ShapeError(f"{name}: expected (N, {SEGMENT_LEN}) waveforms or (N, mels, frames) spectrograms")
    return X, y


def _features(X, idx, mel, aug, seed, epoch):
    """Model inputs (B, 1, mels, frames) for items ``idx`` of ``X``."""
    chunk = X[idx]
    if X.ndim == 2:
        rngs = [item_rng(seed, epoch, i) for i in idx] if aug is not None else None
        specs = featurize_batch(chunk, mel, aug=aug, rngs=rngs)
    else:
        specs = np.asarray(chunk, dtype=np.float32)
        if aug is not None:
            specs = np.stack([apply_masks(s, draw_masks(item_rng(seed, epoch, i), s.shape, aug), s.mean())
                              for s, i in zip(specs, idx)])
            specs = standardize(specs).astype(np.float32)
    return specs[:, None]


def featurize_all(X, mel: MelConfig = MelConfig(), batch=64):
    """Un-augmented model inputs for a whole set."""
    X = np.asarray(X)
    parts = [_features(X, np.arange(s, min(s + batch, len(X))), mel, None, 0, 0) for s in range(0, len(X), batch)]
    return np.concatenate(parts) if parts else np.zeros((0, 1, mel.n_mels, 64), dtype=np.float32)


def accuracy_of(model: Classifier, inputs, labels):
    pred = np.argmax(model.logits(inputs), axis=1)
    return float(np.mean(pred == labels))


def train(model: Classifier, train_data, val_data, cfg: RunConfig, mel: MelConfig = MelConfig(),
          aug: AugmentConfig | None = AugmentConfig(), seed=None):
    """Train ``model`` in place; return (peak-validation snapshot, history).

    ``train_data``/``val_data`` are (X, y) with X either raw segments
    (N, 14400), which get fresh time-shift + masking per epoch, or
    precomputed spectrograms (N, mels, frames), which get masking only.
    After the call ``model`` holds the final-epoch weights.
    """
    seed = cfg.seed if seed is None else seed
    n_classes = model.config.n_classes
    Xtr, ytr = _check_data(*train_data, "train", n_classes)
    Xva, yva = _check_data(*val_data, "validation", n_classes)
    val_inputs = featurize_all(Xva, mel)
    params = list(model.params.values())
    state = AdamState()
    history = TrainHistory()
    best_state = None
    for epoch in range(cfg.epochs):
        model.train()
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([seed, _SHUFFLE_STREAM, epoch]).permutation(len(Xtr))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            inputs = _features(Xtr, idx, mel, aug, seed, epoch)
            model.zero_grad()
            logits = model(inputs)
            loss = F.cross_entropy(logits, ytr[idx])
            loss.backward()
            adam_step([p.data for p in params], [p.grad for p in params], state, lr, cfg.betas, cfg.eps)
            total_loss += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == ytr[idx]))
        history.train_loss.append(total_loss / len(Xtr))
        history.train_accuracy.append(correct / len(Xtr))
        msg = f"epoch {epoch}: lr={lr:.3g} loss={history.train_loss[-1]:.4f} acc={history.train_accuracy[-1]:.3f}"
        if (epoch + 1) % cfg.validate_every == 0:
            model.eval()
            acc = accuracy_of(model, val_inputs, yva)
            history.val_accuracy[epoch] = acc
            msg += f" val_acc={acc:.3f}"
            if history.peak_val_accuracy is None or acc > history.peak_val_accuracy:
                history.peak_val_accuracy, history.peak_epoch = acc, epoch
                best_state = model.state_dict()
        log.info(msg)
    model.eval()
    best = model.copy()
    if best_state is not None:
        best.load_state_dict(best_state)
    best.eval()
    return best, history


@dataclass
class Evaluation:
    predictions: np.ndarray
    topk: np.ndarray
    labels: np.ndarray
    confusion: metrics.ConfusionMatrix
    report: metrics.ClassificationReport
    top1: float
    top5: float
    near_miss: metrics.NearMissProfile


def evaluate(model: Classifier, X, y, mel: MelConfig = MelConfig(), k=5) -> Evaluation:
    """Eval-mode inference on un-augmented inputs and the full metric bundle."""
    model.eval()
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64).ravel()
    if len(X) == 0:
        raise DataError("test split is empty")
    if len(X) != len(y):
        raise ShapeError(f"{len(X)} inputs but {len(y)} labels")
    if X.ndim == 2:
        inputs = featurize_all(X, mel)
    elif X.ndim == 3:
        inputs = np.asarray(X, dtype=np.float32)[:, None]
    else:
        inputs = np.asarray(X, dtype=np.float32)
    logits = model.logits(inputs)
    n_classes = model.config.n_classes
    k = min(k, n_classes)
    topk = topk_from_logits(logits, k)
    pred = topk[:, 0]
    cm = metrics.confusion_matrix(y, pred, n_classes)
    return Evaluation(
        predictions=pred,
        topk=topk,
        labels=y,
        confusion=cm,
        report=metrics.classification_report(cm),
        top1=metrics.top_k_accuracy(topk, y, 1),
        top5=metrics.top_k_accuracy(topk, y, k),
        near_miss=metrics.near_miss_profile(cm) if n_classes <= 36 else None,
    )

"""Optimization loop: BCE loss, Adam, per-dataset presets, checkpoint policy.

Presets carry the published recipes: DRIVE trains with batch 2 for 100
epochs, CHASE with batch 1 for 50, STARE with batch 3 for 80, all at a
constant learning rate of 1e-3 with DropBlock size 7 / rate 0.15 and a 10%
validation split drawn from the augmented training pool. The smoke preset
is a desk-scale memorization run on 4 synthetic images used by the test
suite. The best-validation-AUC weights are snapshotted every epoch and
returned alongside the final ones.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import FundusSample, SplitPlan, augment, crop_to_original
from .errors import ConfigError, NumericError, ShapeError
from .metrics import auc, dice
from .network import CarUnet
from .tensor import Tape, Tensor, backward, record

BCE_CLAMP = 1e-7  # probability clamp; keeps log() finite at saturated outputs


@dataclass
class TrainConfig:
    dataset_kind: str = "synthetic"
    batch_size: int = 2
    epochs: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 1234
    validation_fraction: float = 0.10
    augment_factor: int = 4  # pool size multiplier; 1 disables augmentation
    max_steps: int = 0  # 0 = no cap

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        if self.augment_factor < 1:
            raise ConfigError(f"augment_factor must be >= 1, got {self.augment_factor}")


# Published per-dataset recipes plus the desk-scale smoke run.
TRAIN_PRESETS: dict[str, TrainConfig] = {
    "drive": TrainConfig(dataset_kind="drive", batch_size=2, epochs=100, learning_rate=1e-3),
    "chase": TrainConfig(dataset_kind="chase", batch_size=1, epochs=50, learning_rate=1e-3),
    "stare": TrainConfig(dataset_kind="stare", batch_size=3, epochs=80, learning_rate=1e-3),
    "smoke": TrainConfig(
        dataset_kind="synthetic",
        batch_size=2,
        epochs=100,
        learning_rate=1e-3,
        validation_fraction=0.0,
        augment_factor=1,
        max_steps=200,
    ),
}

# Completed full-scale DRIVE runs are expected to land within 0.02 AUC of
# the published 0.9852; this is a documented reference target, not a test
# gate, because a full run takes hours on desktop hardware.
DRIVE_REFERENCE_AUC = 0.9852
DRIVE_REFERENCE_AUC_TOLERANCE = 0.02


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross entropy with the probabilities clamped to [1e-7, 1-1e-7]."""
    target_arr = target.data if isinstance(target, Tensor) else np.asarray(target)

    def fwd(pa):
        if pa.shape != target_arr.shape:
            raise ShapeError(f"op 'bce_loss': prediction shape {pa.shape} does not match target shape {target_arr.shape}")
        t = target_arr.astype(pa.dtype)
        lo, hi = pa.dtype.type(BCE_CLAMP), pa.dtype.type(1.0 - BCE_CLAMP)
        p = np.clip(pa, lo, hi)
        loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()

        def bwd(g):
            inside = (pa > lo) & (pa < hi)  # clamp boundary gets zero gradient
            gp = (p - t) / (p * (1.0 - p) * pa.size)
            return (g * np.where(inside, gp, 0.0).astype(pa.dtype),)

        return np.asarray(loss, dtype=pa.dtype), bwd

    return record("bce_loss", (pred,), fwd)


@dataclass
class AdamState:
    """First/second moment buffers mirroring the parameter list, plus the step count."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params])


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> None:
    """One Adam update with bias correction: p -= lr * m_hat / (sqrt(v_hat) + eps)."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + epsilon)).astype(p.data.dtype)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.state = AdamState.for_params(params)

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_epoch: int
    best_val_auc: float
    best_state: dict[str, np.ndarray]
    final_train_dice: float
    steps: int
    seconds: float
    pool_size: int = 0
    validation_ids: list[str] = field(default_factory=list)


def build_training_pool(
    samples: list[FundusSample], plan: SplitPlan, config: TrainConfig
) -> tuple[list[FundusSample], list[FundusSample], list[FundusSample]]:
    """Augment the training split and carve out the validation set.

    Returns (train_pool, validation, originals). With validation_fraction 0
    (or a pool too small for one held-out image) validation falls back to
    the training pool itself; that is the documented smoke-test behavior.
    """
    by_id = {s.id: s for s in samples}
    originals = [by_id[i] for i in plan.train]
    pool = list(originals)
    for copy in range(1, config.augment_factor):
        for k, s in enumerate(originals):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2000 + copy, k]))
            pool.append(augment(s, rng, tag=f"aug{copy}"))
    n_val = int(round(config.validation_fraction * len(pool)))
    if n_val > 0:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3000]))
        order = rng.permutation(len(pool))
        val = [pool[i] for i in order[:n_val]]
        train_pool = [pool[i] for i in order[n_val:]]
    else:
        val = list(pool)
        train_pool = pool
    return train_pool, val, originals


def _batch_eval(net: CarUnet, samples: list[FundusSample]) -> tuple[float, float]:
    """Validation loss and pooled AUC in eval mode, predictions cropped back."""
    net.set_mode("eval")
    losses = []
    scores = []
    labels = []
    for s in samples:
        out = net.forward(Tensor(s.image[None]))
        losses.append(float(bce_loss(out, s.mask[None]).item()))
        prob = crop_to_original(out.data[0], s.pad_offsets, s.original_size)
        truth = crop_to_original(s.mask, s.pad_offsets, s.original_size)
        scores.append(prob.ravel())
        labels.append(truth.ravel().astype(np.uint8))
    net.set_mode("train")
    return float(np.mean(losses)), auc(np.concatenate(scores), np.concatenate(labels))


def train_dice(net: CarUnet, samples: list[FundusSample], threshold: float = 0.5) -> float:
    """Pooled Dice over samples in eval mode; the memorization gate for smoke runs."""
    net.set_mode("eval")
    inter = 0
    total = 0
    for s in samples:
        prob = crop_to_original(net.forward(Tensor(s.image[None])).data[0], s.pad_offsets, s.original_size)
        pred = prob > threshold
        truth = crop_to_original(s.mask, s.pad_offsets, s.original_size) > 0.5
        inter += int(np.count_nonzero(pred & truth))
        total += int(np.count_nonzero(pred)) + int(np.count_nonzero(truth))
    return 1.0 if total == 0 else 2.0 * inter / total


def train(net: CarUnet, samples: list[FundusSample], plan: SplitPlan, config: TrainConfig) -> TrainResult:
    """Run the optimization loop; fully reproducible for a fixed seed.

    Aborts with diagnostics the moment a non-finite loss appears. Keeps an
    in-memory snapshot of the weights at the best validation AUC.
    """
    config.validate()
    t0 = time.time()
    train_pool, val_samples, originals = build_training_pool(samples, plan, config)
    params = net.parameters()
    opt = Adam(params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, epsilon=config.adam_epsilon)
    history: list[EpochStats] = []
    best_auc = -1.0
    best_epoch = -1
    best_state: dict[str, np.ndarray] = {}
    steps = 0
    net.set_mode("train")
    done = False
    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1000 + epoch]))
        order = rng.permutation(len(train_pool))
        epoch_losses = []
        for b0 in range(0, len(order), config.batch_size):
            idx = order[b0 : b0 + config.batch_size]
            images = np.stack([train_pool[i].image for i in idx])
            masks = np.stack([train_pool[i].mask for i in idx])
            opt.zero_grad()
            with Tape() as tape:
                out = net.forward(Tensor(images))
                loss = bce_loss(out, masks)
            loss_val = float(loss.item())
            if not np.isfinite(loss_val):
                raise NumericError(f"non-finite training loss {loss_val} at epoch {epoch}, batch {b0 // config.batch_size}")
            backward(tape, loss)
            opt.step()
            epoch_losses.append(loss_val)
            steps += 1
            if config.max_steps and steps >= config.max_steps:
                done = True
                break
        val_loss, val_auc = _batch_eval(net, val_samples)
        history.append(EpochStats(epoch=epoch, train_loss=float(np.mean(epoch_losses)), val_loss=val_loss, val_auc=val_auc))
        if val_auc > best_auc:
            best_auc = val_auc
            best_epoch = epoch
            best_state = net.snapshot_state()
        if done:
            break
    final_dice = train_dice(net, originals)
    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_auc=best_auc,
        best_state=best_state,
        final_train_dice=final_dice,
        steps=steps,
        seconds=time.time() - t0,
        pool_size=len(train_pool),
        validation_ids=[s.id for s in val_samples],
    )

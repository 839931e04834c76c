"""Training regimes: natural, PGD adversarial, free replay, TRADES, RFGSM.

All regimes share one SGD-with-momentum loop (milestone learning-rate decay,
ragged final batches dropped) and differ only in how each minibatch step
builds its loss:

* natural      -- cross-entropy on clean examples.
* pgd_adv      -- PGD perturbations generated on the fly; the step minimizes
                  kappa * J(f(x), y) + (1 - kappa) * J(f(x + delta), y).
* free_m       -- a persistent perturbation buffer is carried across steps;
                  every minibatch is visited m consecutive times, each visit
                  doing ONE forward/backward that yields both the parameter
                  gradient and the input gradient, then updating both
                  simultaneously.  Runs for epochs/m data passes.
* trades       -- J(f(x), y) + lambda_inv * J(f(x + delta), p) where p is the
                  detached clean prediction distribution and delta ascends
                  the second term for K steps inside the epsilon ball.
* rfgsm        -- single-step adversarial training (classical or the
                  Gaussian-init variant) on half the epochs.

Weighted loss terms with an exactly zero weight are skipped rather than
multiplied by zero, so the documented reductions (kappa=1, m=1 with eps=0,
lambda_inv=0) are bit-exact.  Attack passes during training use
current-batch normalization statistics but never advance the running
statistics; only the parameter-update pass does.

Determinism: data order, augmentation and attack initializations are all
drawn from independent substreams of the config seed, so a (seed, config,
dataset) triple fixes the whole parameter trajectory bit-for-bit.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, perturb, pgd
from .data import Dataset
from .errors import ConfigError
from .models import ModelGraph
from .optim import sgd_momentum_step, zero_velocity
from .rng import Rng, substream_seed
from .tensor import Tape, Tensor, add, backward, scale, softmax, softmax_cross_entropy

OBJECTIVES = ("natural", "pgd_adv", "free_m", "trades", "rfgsm")


def _default_attack() -> AttackConfig:
    return AttackConfig("pgd", eps=8.0, step=2.0, iters=7)


@dataclass(frozen=True)
class TrainConfig:
    """Objective tag plus the full optimization schedule."""

    objective: str = "natural"
    epochs: int = 120
    batch_size: int = 256
    lr: float = 0.1
    decay_milestones: tuple = (60, 90)
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    kappa: float = 0.0
    attack: AttackConfig = field(default_factory=_default_attack)
    m: int = 10
    lambda_inv: float = 6.0
    init_checkpoint: str | None = None
    seed: int = 0
    augment: bool = False
    robust_val_iters: int = 0   # PGD-k robust validation each epoch when > 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective '{self.objective}' (choose from {OBJECTIVES})")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError(f"kappa must lie in [0, 1], got {self.kappa}")
        if self.lambda_inv < 0.0:
            raise ConfigError(f"lambda_inv must be >= 0, got {self.lambda_inv}")
        if self.m < 1:
            raise ConfigError(f"free replay count m must be >= 1, got {self.m}")
        if self.decay_factor <= 0:
            raise ConfigError("decay_factor must be positive")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float            # accuracy on training examples as seen (adversarial for robust regimes)
    nat_val_acc: float | None
    rob_val_acc: float | None
    grad_passes: int            # cumulative combined forward/backward executions
    seconds: float


@dataclass
class TrainReport:
    """Per-epoch training records, exportable as CSV."""

    objective: str
    seed: int
    records: list = field(default_factory=list)

    CSV_HEADER = "epoch,loss,train_acc,nat_val_acc,rob_val_acc,grad_passes,seconds"

    def to_csv(self, zero_time: bool = False) -> str:
        """Render the fixed-header CSV.

        ``zero_time`` blanks the wall-time column; timing is the one field
        that is not a deterministic function of (seed, config, dataset).
        """
        lines = [self.CSV_HEADER]
        for r in self.records:
            nat = "" if r.nat_val_acc is None else f"{r.nat_val_acc:.6f}"
            rob = "" if r.rob_val_acc is None else f"{r.rob_val_acc:.6f}"
            secs = 0.0 if zero_time else r.seconds
            lines.append(
                f"{r.epoch},{r.loss:.6f},{r.train_acc:.6f},{nat},{rob},{r.grad_passes},{secs:.3f}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str, zero_time: bool = False):
        with open(path, "w") as f:
            f.write(self.to_csv(zero_time=zero_time))


def learning_rate_at(epoch: int, cfg: TrainConfig) -> float:
    """Milestone schedule: divide lr by decay_factor at each milestone <= epoch."""
    drops = sum(1 for ms in cfg.decay_milestones if ms <= epoch)
    return cfg.lr / (cfg.decay_factor ** drops)


def apply_tricks(cfg: TrainConfig, step: float | None = None) -> TrainConfig:
    """Normalize a config for the two known training tricks.

    Trick 1 (warm start from a naturally trained model) rides on
    ``cfg.init_checkpoint`` and is applied by the trainer itself.  Trick 2
    (large perturbation step, conventionally 6 pixel levels) is applied here
    when ``step`` is given.  Without arguments the config passes through
    unchanged.
    """
    if step is None:
        return cfg
    return replace(cfg, attack=replace(cfg.attack, step=float(step)))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def effective_epochs(cfg: TrainConfig) -> int:
    """Data passes actually run: epochs/m for free_m, half for rfgsm."""
    if cfg.epochs == 0:
        return 0
    if cfg.objective == "free_m":
        return max(1, _round_half_up(cfg.epochs / cfg.m))
    if cfg.objective == "rfgsm":
        return max(1, _round_half_up(cfg.epochs / 2.0))
    return cfg.epochs


def _augment_batch(x: np.ndarray, rng: Rng, pad: int = 4) -> np.ndarray:
    """Horizontal flip plus random crop from a 4-pixel-padded canvas."""
    n, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    for i in range(n):
        dy = rng.randint(2 * pad + 1)
        dx = rng.randint(2 * pad + 1)
        img = xp[i, :, dy : dy + h, dx : dx + w]
        if rng.randint(2):
            img = img[:, :, ::-1]
        out[i] = img
    return out


def _natural_accuracy(model: ModelGraph, ds: Dataset, batch_size: int) -> float:
    preds = model.predict(ds.images, batch_size=batch_size)
    return float((preds == ds.labels).mean())


def _robust_accuracy(model: ModelGraph, ds: Dataset, attack: AttackConfig, batch_size: int) -> float:
    correct = 0
    for lo in range(0, ds.n, batch_size):
        x = ds.images[lo : lo + batch_size]
        y = ds.labels[lo : lo + batch_size]
        delta = perturb(model, x, y, attack, batch_stats=False,
                        indices=np.arange(lo, lo + x.shape[0])).delta
        logits = model.forward(x + delta, batch_stats=False, update_stats=False)
        correct += int((np.argmax(logits.data, axis=1) == y).sum())
    return correct / ds.n


def _optimizer_step(model: ModelGraph, tape: Tape, loss, velocity: dict,
                    lr: float, cfg: TrainConfig):
    grads = backward(tape, loss)
    model.grad_passes += 1
    new_params, new_velocity = sgd_momentum_step(
        model.params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
    model.set_params(new_params)
    return new_velocity, grads


# ---------------------------------------------------------------------------
# the shared loop
# ---------------------------------------------------------------------------

class _Loop:
    """Shared epoch/minibatch scaffolding; regimes provide the batch step."""

    def __init__(self, model: ModelGraph, train_ds: Dataset, cfg: TrainConfig,
                 val_ds: Dataset | None, checkpoint_dir: str | None):
        if train_ds.n == 0:
            raise ConfigError("training dataset is empty")
        if train_ds.n < cfg.batch_size:
            raise ConfigError(
                f"batch size {cfg.batch_size} exceeds dataset size {train_ds.n}")
        self.model = model
        self.train_ds = train_ds
        self.cfg = cfg
        self.val_ds = val_ds
        self.checkpoint_dir = checkpoint_dir
        self.velocity = zero_velocity(model.params)
        self.batches_per_epoch = train_ds.n // cfg.batch_size  # ragged final batch dropped
        self.data_rng = Rng(cfg.seed).derive("data")
        self.aug_rng = Rng(cfg.seed).derive("augment")

    def attack_cfg_for(self, base: AttackConfig, epoch: int, batch: int) -> AttackConfig:
        return replace(base, seed=substream_seed(self.cfg.seed, "attack", epoch, batch))

    def run(self, step_fn, visits_per_batch: int = 1) -> TrainReport:
        cfg = self.cfg
        model = self.model
        if cfg.init_checkpoint:
            from .checkpoint import load_checkpoint_into
            load_checkpoint_into(model, cfg.init_checkpoint)
        report = TrainReport(objective=cfg.objective, seed=cfg.seed)
        epochs = effective_epochs(cfg)
        for epoch in range(epochs):
            t0 = time.perf_counter()
            model.train()
            lr = learning_rate_at(epoch, cfg)
            order = self.data_rng.permutation(self.train_ds.n)
            loss_sum = 0.0
            correct = 0
            seen = 0
            for b in range(self.batches_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                x = self.train_ds.images[idx]
                y = self.train_ds.labels[idx]
                if cfg.augment:
                    x = _augment_batch(x, self.aug_rng)
                for _ in range(visits_per_batch):
                    loss_val, batch_correct = step_fn(self, x, y, idx, epoch, b, lr)
                    loss_sum += loss_val
                    correct += batch_correct
                    seen += len(y)
            model.eval()
            nat = _natural_accuracy(model, self.val_ds, cfg.batch_size) if self.val_ds else None
            rob = None
            if cfg.robust_val_iters > 0 and self.val_ds:
                rob_cfg = replace(cfg.attack, family="pgd", iters=cfg.robust_val_iters,
                                  random_init=True,
                                  seed=substream_seed(cfg.seed, "robust-val", epoch))
                rob = _robust_accuracy(model, self.val_ds, rob_cfg, cfg.batch_size)
            steps = max(1, seen // cfg.batch_size)
            report.records.append(EpochRecord(
                epoch=epoch,
                loss=loss_sum / steps,
                train_acc=correct / max(1, seen),
                nat_val_acc=nat,
                rob_val_acc=rob,
                grad_passes=model.grad_passes,
                seconds=time.perf_counter() - t0,
            ))
            if self.checkpoint_dir and (epoch + 1) in cfg.decay_milestones:
                self._save(f"epoch{epoch + 1}.ckpt")
        if self.checkpoint_dir:
            self._save("final.ckpt")
        return report

    def _save(self, filename: str):
        from .checkpoint import save_checkpoint
        os.makedirs(self.checkpoint_dir, exist_ok=True)
        save_checkpoint(self.model, os.path.join(self.checkpoint_dir, filename),
                        velocity=self.velocity)


# ---------------------------------------------------------------------------
# regimes
# ---------------------------------------------------------------------------

def _clean_step(loop: _Loop, x, y, idx, epoch, b, lr):
    model = loop.model
    with Tape() as tape:
        logits = model.forward(x, batch_stats=True, update_stats=True)
        loss = softmax_cross_entropy(logits, y)
    loop.velocity, _ = _optimizer_step(model, tape, loss, loop.velocity, lr, loop.cfg)
    return loss.item(), int((np.argmax(logits.data, axis=1) == y).sum())


def natural_train(model: ModelGraph, dataset: Dataset, cfg: TrainConfig,
                  val_ds: Dataset | None = None, checkpoint_dir: str | None = None):
    """Standard SGD-momentum training on clean examples."""
    loop = _Loop(model, dataset, cfg, val_ds, checkpoint_dir)
    return model, loop.run(_clean_step)


def pgd_adv_train(model: ModelGraph, dataset: Dataset, cfg: TrainConfig,
                  val_ds: Dataset | None = None, checkpoint_dir: str | None = None):
    """Adversarial training on PGD examples generated on the fly.

    Per minibatch: K attack passes then one parameter pass, i.e. K+1
    combined forward/backward executions.  kappa weights the clean term;
    kappa = 0 is the pure minimax objective and kappa = 1 reduces bit-exactly
    to natural training.
    """
    if cfg.attack.family != "pgd":
        raise ConfigError(f"pgd_adv training requires a pgd attack, got '{cfg.attack.family}'")
    kappa = cfg.kappa

    def step(loop: _Loop, x, y, idx, epoch, b, lr):
        model = loop.model
        acfg = loop.attack_cfg_for(cfg.attack, epoch, b)
        delta = pgd(model, x, y, acfg, batch_stats=True, indices=idx).delta if kappa < 1.0 else None
        with Tape() as tape:
            terms = []
            clean_logits = None
            if kappa > 0.0:
                clean_logits = model.forward(x, batch_stats=True, update_stats=(kappa == 1.0))
                terms.append((kappa, softmax_cross_entropy(clean_logits, y)))
            if kappa < 1.0:
                adv_logits = model.forward(x + delta, batch_stats=True, update_stats=True)
                terms.append((1.0 - kappa, softmax_cross_entropy(adv_logits, y)))
            loss = _weighted_sum(terms)
        loop.velocity, _ = _optimizer_step(model, tape, loss, loop.velocity, lr, loop.cfg)
        seen_logits = adv_logits if kappa < 1.0 else clean_logits
        return loss.item(), int((np.argmax(seen_logits.data, axis=1) == y).sum())

    loop = _Loop(model, dataset, cfg, val_ds, checkpoint_dir)
    return model, loop.run(step)


def free_m_train(model: ModelGraph, dataset: Dataset, cfg: TrainConfig,
                 val_ds: Dataset | None = None, checkpoint_dir: str | None = None):
    """Free adversarial training: m-fold minibatch replay, simultaneous updates.

    One persistent perturbation buffer (batch-shaped, initialized to zero,
    carried across minibatches and epochs) is updated by a sign step and
    clipped to the epsilon ball after every parameter update; both gradients
    come out of a single backward pass, so the per-iteration cost matches
    natural training.
    """
    loop = _Loop(model, dataset, cfg, val_ds, checkpoint_dir)
    if cfg.m > loop.batches_per_epoch * max(1, cfg.epochs):
        raise ConfigError(
            f"m={cfg.m} exceeds the run's minibatch-epoch budget "
            f"({loop.batches_per_epoch} batches x {cfg.epochs} epochs)")
    eps = np.float32(cfg.attack.eps / 255.0)
    step_size = np.float32(cfg.attack.step / 255.0)
    c, s = dataset.channels, dataset.image_size
    state = {"delta": np.zeros((cfg.batch_size, c, s, s), dtype=np.float32)}

    def step(loop: _Loop, x, y, idx, epoch, b, lr):
        model = loop.model
        xt = Tensor(x + state["delta"], requires_grad=True, name="input")
        with Tape() as tape:
            logits = model.forward(xt, batch_stats=True, update_stats=True)
            loss = softmax_cross_entropy(logits, y)
        loop.velocity, grads = _optimizer_step(model, tape, loss, loop.velocity, lr, loop.cfg)
        g_in = grads.wrt(xt).data
        state["delta"] = np.clip(
            state["delta"] + step_size * np.sign(g_in, dtype=np.float32), -eps, eps)
        return loss.item(), int((np.argmax(logits.data, axis=1) == y).sum())

    return model, loop.run(step, visits_per_batch=cfg.m)


def trades_train(model: ModelGraph, dataset: Dataset, cfg: TrainConfig,
                 val_ds: Dataset | None = None, checkpoint_dir: str | None = None):
    """Training on the accuracy/robustness trade-off objective.

    Per minibatch: the clean forward fixes a detached prediction
    distribution p; K inner sign-ascent steps maximize the cross-entropy of
    the perturbed prediction against p inside the epsilon ball; the
    parameter step then minimizes J(f(x), y) + lambda_inv * J(f(x+delta), p).
    """
    lam = cfg.lambda_inv

    def step(loop: _Loop, x, y, idx, epoch, b, lr):
        model = loop.model
        adv_logits = None
        with Tape() as tape:
            clean_logits = model.forward(x, batch_stats=True, update_stats=True)
            loss_nat = softmax_cross_entropy(clean_logits, y)
            p_clean = softmax(clean_logits.data)
            if lam > 0.0:
                acfg = loop.attack_cfg_for(cfg.attack, epoch, b)
                delta = pgd(model, x, p_clean, acfg, batch_stats=True, indices=idx).delta
                adv_logits = model.forward(x + delta, batch_stats=True, update_stats=False)
                loss = add(loss_nat, scale(softmax_cross_entropy(adv_logits, p_clean), lam))
            else:
                loss = loss_nat
        loop.velocity, _ = _optimizer_step(model, tape, loss, loop.velocity, lr, loop.cfg)
        seen = adv_logits if adv_logits is not None else clean_logits
        return loss.item(), int((np.argmax(seen.data, axis=1) == y).sum())

    loop = _Loop(model, dataset, cfg, val_ds, checkpoint_dir)
    return model, loop.run(step)


def rfgsm_train(model: ModelGraph, dataset: Dataset, cfg: TrainConfig,
                val_ds: Dataset | None = None, checkpoint_dir: str | None = None):
    """Single-step adversarial training on half the epochs.

    The attack family selects the classical (uniform init, projected) or the
    Gaussian-init unprojected variant; each minibatch costs exactly two
    combined forward/backward executions.
    """
    if cfg.attack.family not in ("rfgsm_classical", "rfgsm_proposed"):
        raise ConfigError(
            f"rfgsm training requires an rfgsm attack family, got '{cfg.attack.family}'")

    def step(loop: _Loop, x, y, idx, epoch, b, lr):
        model = loop.model
        acfg = loop.attack_cfg_for(cfg.attack, epoch, b)
        delta = perturb(model, x, y, acfg, batch_stats=True, indices=idx).delta
        with Tape() as tape:
            logits = model.forward(x + delta, batch_stats=True, update_stats=True)
            loss = softmax_cross_entropy(logits, y)
        loop.velocity, _ = _optimizer_step(model, tape, loss, loop.velocity, lr, loop.cfg)
        return loss.item(), int((np.argmax(logits.data, axis=1) == y).sum())

    loop = _Loop(model, dataset, cfg, val_ds, checkpoint_dir)
    return model, loop.run(step)


def _weighted_sum(terms):
    """Combine (weight, scalar-tensor) terms, skipping exact-zero weights."""
    live = [(w, t) for w, t in terms if w != 0.0]
    if not live:
        raise ConfigError("loss vanished: every term has zero weight")
    if len(live) == 1 and live[0][0] == 1.0:
        return live[0][1]
    total = scale(live[0][1], live[0][0])
    for w, t in live[1:]:
        total = add(total, scale(t, w))
    return total


_TRAINERS = {
    "natural": natural_train,
    "pgd_adv": pgd_adv_train,
    "free_m": free_m_train,
    "trades": trades_train,
    "rfgsm": rfgsm_train,
}


def train(model: ModelGraph, dataset: Dataset, cfg: TrainConfig,
          val_ds: Dataset | None = None, checkpoint_dir: str | None = None):
    """Dispatch to the regime selected by ``cfg.objective``."""
    return _TRAINERS[cfg.objective](model, dataset, cfg, val_ds=val_ds,
                                    checkpoint_dir=checkpoint_dir)

"""Gradient-based adversarial perturbation generators in pixel space.

Budgets are expressed in 0-255 pixel levels and divided by 255 internally,
matching images scaled to [0, 1].  All attacks query the model only through
its forward + input-gradient surface (``loss_and_input_grad``); no access to
parameters is needed, so anything exposing that method can be attacked.

Families:

* ``fgsm``       -- delta = eps * sign(grad_x loss), single step.
* ``rfgsm``      -- classical randomized FGSM: uniform init in the eps ball,
                    one step of size ``step``, then projection back onto the ball.
* ``rfgsm+``     -- the Gaussian-init variant: init from N(0, sigma^2) with
                    sigma defaulting to 2*eps, one FGSM step of size eps, and
                    no ball projection afterwards.
* ``bim``        -- iterative FGSM: K steps of size ``step`` with per-step
                    ball clipping, zero init.
* ``pgd``        -- bim plus uniform random init in the ball.

Every random initialization is drawn per sample from a stream keyed by
(seed, sample index), so results do not depend on batch partitioning.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import AttackError, ConfigError
from .rng import Rng

FAMILIES = ("fgsm", "rfgsm_classical", "rfgsm_proposed", "bim", "pgd")

_TOKEN_TO_FAMILY = {
    "fgsm": "fgsm",
    "rfgsm": "rfgsm_classical",
    "rfgsm+": "rfgsm_proposed",
    "bim": "bim",
    "pgd": "pgd",
}
_FAMILY_TO_TOKEN = {v: k for k, v in _TOKEN_TO_FAMILY.items()}


@dataclass(frozen=True)
class AttackConfig:
    """One attack family plus its budget, all in 0-255 pixel levels."""

    family: str
    eps: float = 8.0
    step: float = 2.0
    iters: int = 20
    sigma: float | None = None      # rfgsm+ only; defaults to 2*eps
    random_init: bool = True        # pgd only; bim is pgd without init
    pixel_clamp: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown attack family '{self.family}' (choose from {FAMILIES})")
        if self.eps < 0 or self.step < 0:
            raise ConfigError("eps and step must be non-negative pixel levels")
        if self.family in ("bim", "pgd"):
            if self.iters < 1:
                raise ConfigError(f"iterative attacks need K >= 1, got {self.iters}")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError("sigma must be non-negative")

    @property
    def sigma_or_default(self) -> float:
        return 2.0 * self.eps if self.sigma is None else self.sigma

    def to_string(self) -> str:
        """Canonical attack string, parseable by :func:`parse_attack`."""
        token = _FAMILY_TO_TOKEN[self.family]
        parts = [f"eps={_fmt(self.eps)}"]
        if self.family in ("bim", "pgd"):
            parts.insert(0, f"k={self.iters}")
            parts.append(f"step={_fmt(self.step)}")
        elif self.family == "rfgsm_classical":
            parts.append(f"step={_fmt(self.step)}")
        elif self.family == "rfgsm_proposed":
            parts.append(f"sigma={_fmt(self.sigma_or_default)}")
        if not self.pixel_clamp:
            parts.append("clamp=0")
        return f"{token}:{','.join(parts)}"


def _fmt(v: float) -> str:
    return f"{v:g}"


def parse_attack(text: str, seed: int = 0) -> AttackConfig:
    """Parse an attack string: family token plus optional k=v list.

    Grammar: ``family[:key=value,key=value,...]`` with keys among
    k, eps, step, sigma, clamp, seed.  Examples: ``pgd:k=20,eps=8,step=2``,
    ``fgsm:eps=8``, ``rfgsm+:eps=8,sigma=16``.
    """
    text = text.strip()
    token, _, rest = text.partition(":")
    family = _TOKEN_TO_FAMILY.get(token.strip())
    if family is None:
        raise ConfigError(f"unknown attack family '{token}' in '{text}'")
    kwargs: dict = {"family": family, "seed": seed}
    if rest:
        for item in rest.split(","):
            if not item.strip():
                raise ConfigError(f"empty key=value entry in attack string '{text}'")
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"expected key=value, got '{item}' in attack string '{text}'")
            key = key.strip()
            value = value.strip()
            try:
                if key == "k":
                    kwargs["iters"] = int(value)
                elif key in ("eps", "step", "sigma"):
                    kwargs[key] = float(value)
                elif key == "clamp":
                    kwargs["pixel_clamp"] = bool(int(value))
                elif key == "seed":
                    kwargs["seed"] = int(value)
                else:
                    raise ConfigError(f"unknown attack key '{key}' in '{text}'")
            except ValueError as exc:
                raise ConfigError(f"bad value for '{key}' in attack string '{text}': {value}") from exc
    return AttackConfig(**kwargs)


@dataclass
class Perturbation:
    """An additive perturbation for one attacked batch."""

    delta: np.ndarray

    def applied_to(self, x: np.ndarray) -> np.ndarray:
        return x + self.delta


# ---------------------------------------------------------------------------
# internals
# ---------------------------------------------------------------------------

def _per_sample_init(cfg: AttackConfig, shape, indices, kind: str) -> np.ndarray:
    """Initial delta drawn independently per sample from (seed, sample index)."""
    n = shape[0]
    if indices is None:
        indices = np.arange(n)
    if len(indices) != n:
        raise ConfigError(f"{n} samples but {len(indices)} sample indices")
    base = Rng(cfg.seed).derive("attack-init")
    out = np.empty(shape, dtype=np.float32)
    e = cfg.eps / 255.0
    for i, idx in enumerate(indices):
        r = base.derive(int(idx))
        if kind == "uniform":
            out[i] = r.uniform(shape[1:], low=-e, high=e)
        else:
            out[i] = r.normal(shape[1:], std=cfg.sigma_or_default / 255.0)
    return out


def _input_grad(model, x, y, batch_stats: bool) -> np.ndarray:
    _, grad, _ = model.loss_and_input_grad(x, y, batch_stats=batch_stats)
    if not np.all(np.isfinite(grad)):
        raise AttackError("non-finite input gradient during attack")
    return grad.astype(np.float32, copy=False)


def _box_clamp(delta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Restrict delta so x + delta stays in the valid image box [0, 1]."""
    return np.clip(x + delta, 0.0, 1.0).astype(np.float32, copy=False) - x


# ---------------------------------------------------------------------------
# attack families
# ---------------------------------------------------------------------------

def fgsm(model, x, y, cfg: AttackConfig, batch_stats: bool = False,
         indices=None, trace=None) -> Perturbation:
    """Single-step sign attack: delta = (eps/255) * sign(grad)."""
    x = np.asarray(x, dtype=np.float32)
    g = _input_grad(model, x, y, batch_stats)
    delta = (cfg.eps / 255.0) * np.sign(g, dtype=np.float32)
    if cfg.pixel_clamp:
        delta = _box_clamp(delta, x)
    if trace is not None:
        trace.append(delta.copy())
    return Perturbation(delta)


def rfgsm_classical(model, x, y, cfg: AttackConfig, batch_stats: bool = False,
                    indices=None, trace=None) -> Perturbation:
    """Uniform init in the ball, one step of size ``step``, projected back."""
    x = np.asarray(x, dtype=np.float32)
    e = np.float32(cfg.eps / 255.0)
    delta = _per_sample_init(cfg, x.shape, indices, "uniform")
    g = _input_grad(model, x + delta, y, batch_stats)
    delta = delta + np.float32(cfg.step / 255.0) * np.sign(g, dtype=np.float32)
    delta = np.clip(delta, -e, e)
    if cfg.pixel_clamp:
        delta = _box_clamp(delta, x)
    if trace is not None:
        trace.append(delta.copy())
    return Perturbation(delta)


def rfgsm_proposed(model, x, y, cfg: AttackConfig, batch_stats: bool = False,
                   indices=None, trace=None) -> Perturbation:
    """Gaussian init (sigma defaults to 2*eps), FGSM step of size eps, no projection.

    The step is still bounded because its magnitude is exactly eps; only the
    valid-image box clamp is applied afterwards (when enabled).
    """
    x = np.asarray(x, dtype=np.float32)
    delta = _per_sample_init(cfg, x.shape, indices, "normal")
    g = _input_grad(model, x + delta, y, batch_stats)
    delta = delta + np.float32(cfg.eps / 255.0) * np.sign(g, dtype=np.float32)
    if cfg.pixel_clamp:
        delta = _box_clamp(delta, x)
    if trace is not None:
        trace.append(delta.copy())
    return Perturbation(delta)


def pgd(model, x, y, cfg: AttackConfig, batch_stats: bool = False,
        indices=None, trace=None) -> Perturbation:
    """K sign-gradient steps with per-iteration ball projection.

    Random uniform initialization when ``cfg.random_init``; bim is this
    attack without it.  Iteration order per step: sign step, clip to the
    eps ball, then clamp x+delta to the image box.
    """
    x = np.asarray(x, dtype=np.float32)
    e = np.float32(cfg.eps / 255.0)
    step = np.float32(cfg.step / 255.0)
    if cfg.random_init:
        delta = _per_sample_init(cfg, x.shape, indices, "uniform")  # already in the ball
    else:
        delta = np.zeros_like(x)
    for _ in range(cfg.iters):
        g = _input_grad(model, x + delta, y, batch_stats)
        delta = delta + step * np.sign(g, dtype=np.float32)
        delta = np.clip(delta, -e, e)
        if cfg.pixel_clamp:
            delta = _box_clamp(delta, x)
        if trace is not None:
            trace.append(delta.copy())
    return Perturbation(delta)


def bim(model, x, y, cfg: AttackConfig, batch_stats: bool = False,
        indices=None, trace=None) -> Perturbation:
    """Iterative FGSM: pgd without the random initialization."""
    return pgd(model, x, y, replace(cfg, family="pgd", random_init=False),
               batch_stats=batch_stats, indices=indices, trace=trace)


_RUNNERS = {
    "fgsm": fgsm,
    "rfgsm_classical": rfgsm_classical,
    "rfgsm_proposed": rfgsm_proposed,
    "bim": bim,
    "pgd": pgd,
}


def perturb(model, x, y, cfg: AttackConfig, batch_stats: bool = False,
            indices=None, trace=None) -> Perturbation:
    """Run the attack selected by ``cfg.family``."""
    return _RUNNERS[cfg.family](model, x, y, cfg, batch_stats=batch_stats,
                                indices=indices, trace=trace)

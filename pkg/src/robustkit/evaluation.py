"""Robust-accuracy reports, loss-surface grids and adversarial-example export.

Evaluation always runs the model in evaluation mode (running statistics) and
seeds each sample's attack initialization from (report seed, sample index),
so results are independent of batch partitioning and reproducible byte for
byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, parse_attack, perturb
from .data import Dataset
from .errors import ConfigError, NonFiniteError, ParseError, RobustkitError
from .images import write_image
from .models import ModelGraph
from .rng import Rng, substream_seed
from .tensor import softmax_cross_entropy, Tensor, Tape


@dataclass
class EvalReport:
    """Natural accuracy plus robust accuracy per attack string."""

    natural_accuracy: float
    robust_accuracy: dict = field(default_factory=dict)
    n: int = 0
    seed: int = 0

    def to_csv(self) -> str:
        lines = ["attack,accuracy,n,seed"]
        lines.append(f"natural,{self.natural_accuracy:.6f},{self.n},{self.seed}")
        for name, acc in self.robust_accuracy.items():
            lines.append(f"{name},{acc:.6f},{self.n},{self.seed}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str):
        with open(path, "w") as f:
            f.write(self.to_csv())


def robust_accuracy(model: ModelGraph, dataset: Dataset, attack_cfg: AttackConfig,
                    seed: int = 0, batch_size: int = 256) -> EvalReport:
    """Fraction of samples still classified correctly after the attack."""
    if dataset.channels != model.spec.input_channels or dataset.image_size != model.spec.input_size:
        raise ConfigError(
            f"dataset images {dataset.channels}x{dataset.image_size} do not match model input "
            f"{model.spec.input_channels}x{model.spec.input_size}")
    model.eval()
    attack_cfg = replace(attack_cfg, seed=substream_seed(seed, "eval-attack"))
    nat_correct = 0
    adv_correct = 0
    for lo in range(0, dataset.n, batch_size):
        x = dataset.images[lo : lo + batch_size]
        y = dataset.labels[lo : lo + batch_size]
        indices = np.arange(lo, lo + x.shape[0])
        nat_correct += int((model.predict(x, batch_size=batch_size) == y).sum())
        delta = perturb(model, x, y, attack_cfg, batch_stats=False, indices=indices).delta
        adv_pred = model.predict(x + delta, batch_size=batch_size)
        adv_correct += int((adv_pred == y).sum())
    report = EvalReport(natural_accuracy=nat_correct / dataset.n, n=dataset.n, seed=seed)
    report.robust_accuracy[attack_cfg.to_string()] = adv_correct / dataset.n
    return report


# ---------------------------------------------------------------------------
# loss surfaces
# ---------------------------------------------------------------------------

@dataclass
class SurfaceGrid:
    """Loss values on a 2-D slice of pixel space around one sample.

    values[i][j] = J(f(clamp(x + a_i * d1 + b_j * d2)), y) with a, b spaced
    over [-extent, extent] pixel levels; d1 is the adversarial sign
    direction, d2 a seeded Rademacher direction, both with unit sup-norm.
    """

    axis1: np.ndarray
    axis2: np.ndarray
    extent: float
    resolution: int
    seed: int
    values: np.ndarray

    def to_csv(self) -> str:
        lines = [
            f"# extent={self.extent:g}",
            f"# resolution={self.resolution}",
            f"# seed={self.seed}",
            "# direction1=adversarial-sign",
            "# direction2=rademacher",
        ]
        for row in self.values:
            lines.append(",".join(f"{v:.8e}" for v in row))
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str):
        with open(path, "w") as f:
            f.write(self.to_csv())


def read_surface_csv(text: str) -> dict:
    """Parse the metadata header and matrix back out of a surface CSV."""
    meta = {}
    rows = []
    for line in text.splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            key, sep, value = body.partition("=")
            if sep:
                meta[key.strip()] = value.strip()
        elif line.strip():
            rows.append([float(v) for v in line.split(",")])
    if not rows or "extent" not in meta or "resolution" not in meta or "seed" not in meta:
        raise ParseError("surface CSV is missing metadata or matrix rows")
    values = np.asarray(rows)
    if values.shape[0] != values.shape[1] or values.shape[0] != int(meta["resolution"]):
        raise ParseError(f"surface CSV matrix shape {values.shape} disagrees with metadata")
    return {"extent": float(meta["extent"]), "resolution": int(meta["resolution"]),
            "seed": int(meta["seed"]), "values": values}


def _loss_of(model: ModelGraph, x: np.ndarray, y) -> float:
    logits = model.forward(x, batch_stats=False, update_stats=False)
    return softmax_cross_entropy(logits, y).item()


def loss_surface(model: ModelGraph, x: np.ndarray, y: int, extent: float = 8.0,
                 resolution: int = 51, seed: int = 0) -> SurfaceGrid:
    """Evaluate the loss on a (resolution x resolution) grid around one sample.

    ``resolution`` must be odd so the exact center cell exists; the center
    equals the clean loss bit-for-bit.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ConfigError(f"loss_surface works on a single sample, got batch of {x.shape[0]}")
    if resolution % 2 != 1 or resolution < 1:
        raise ConfigError(f"resolution must be odd and positive, got {resolution}")
    model.eval()
    y = np.asarray([int(y)])

    _, grad, _ = model.loss_and_input_grad(x, y, batch_stats=False)
    d1 = np.sign(grad, dtype=np.float32)
    d2 = Rng(seed).derive("surface-direction").rademacher(x.shape).astype(np.float32)

    mid = (resolution - 1) // 2
    # (i - mid) * step puts an exact 0.0 at the center cell
    coeffs = [np.float32((i - mid) * (extent / 255.0 / mid)) if mid else np.float32(0.0)
              for i in range(resolution)]
    values = np.zeros((resolution, resolution), dtype=np.float64)
    for i, a in enumerate(coeffs):
        for j, b in enumerate(coeffs):
            probe = np.clip(x + a * d1 + b * d2, 0.0, 1.0).astype(np.float32)
            try:
                values[i, j] = _loss_of(model, probe, y)
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite loss at surface cell ({i}, {j})") from exc
    return SurfaceGrid(axis1=d1, axis2=d2, extent=float(extent),
                       resolution=resolution, seed=seed, values=values)


# ---------------------------------------------------------------------------
# large-perturbation export
# ---------------------------------------------------------------------------

def export_large_eps(model: ModelGraph, dataset: Dataset, out_dir: str,
                     n: int = 16, eps: float = 30.0, k: int = 50,
                     step: float = 2.0, seed: int = 0) -> list:
    """Write original/perturbed images plus a prediction table.

    Uses PGD-k at the given (large) eps on the first ``n`` samples.  Returns
    the table as a list of (index, true, clean_pred, adv_pred) tuples; files
    land in ``out_dir`` as ``orig_XXX``/``adv_XXX`` PGM or PPM plus
    ``predictions.csv``.
    """
    n = min(n, dataset.n)
    model.eval()
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise RobustkitError(f"cannot create output directory {out_dir}: {exc}") from exc
    x = dataset.images[:n]
    y = dataset.labels[:n]
    cfg = AttackConfig("pgd", eps=eps, step=step, iters=k,
                       seed=substream_seed(seed, "export"))
    delta = perturb(model, x, y, cfg, batch_stats=False, indices=np.arange(n)).delta
    clean_pred = model.predict(x)
    adv_pred = model.predict(x + delta)

    ext = "pgm" if dataset.channels == 1 else "ppm"
    table = []
    for i in range(n):
        _write_checked(x[i], os.path.join(out_dir, f"orig_{i:03d}.{ext}"))
        _write_checked(x[i] + delta[i], os.path.join(out_dir, f"adv_{i:03d}.{ext}"))
        table.append((i, int(y[i]), int(clean_pred[i]), int(adv_pred[i])))
    with open(os.path.join(out_dir, "predictions.csv"), "w") as f:
        f.write("index,true,clean_pred,adv_pred\n")
        for row in table:
            f.write(",".join(str(v) for v in row) + "\n")
    return table


def _write_checked(image: np.ndarray, path: str):
    try:
        write_image(image, path)
    except OSError as exc:
        raise RobustkitError(f"failed writing image {path}: {exc}") from exc

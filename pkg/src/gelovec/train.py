"""Loss, optimizer, segmentation metrics, training loop and the finite-difference harness."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, NumericalError

log = logging.getLogger(__name__)

CLAMP = 1e-7
CSV_HEADER = ("epoch", "loss", "iou", "f1", "precision", "recall")


# losses -------------------------------------------------------------------


def bce_loss(pred: np.ndarray, target: np.ndarray):
    """Mean binary cross-entropy and its gradient with respect to ``pred``.

    ``pred`` is clamped to [1e-7, 1 - 1e-7].  The gradient is evaluated at the
    clamped value and passed straight through the clamp, so saturated sigmoid
    outputs keep receiving a learning signal.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} and target {target.shape} differ")
    if not np.all((target == 0) | (target == 1)):
        raise DataError("target mask must contain only 0 and 1")
    p = np.clip(pred, CLAMP, 1 - CLAMP)
    loss = -np.mean(target * np.log(p) + (1 - target) * np.log(1 - p))
    grad = (p - target) / (p * (1 - p)) / pred.size
    return float(loss), grad.astype(pred.dtype)


def dice_loss(pred: np.ndarray, target: np.ndarray, smooth: float = 1.0):
    """Soft Dice loss ``1 - (2|PT| + s) / (|P| + |T| + s)`` with its gradient."""
    inter = np.sum(pred * target)
    denom = np.sum(pred) + np.sum(target) + smooth
    loss = 1.0 - (2 * inter + smooth) / denom
    grad = -(2 * target * denom - (2 * inter + smooth)) / denom**2
    return float(loss), grad.astype(pred.dtype)


# optimizer ----------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, model) -> None:
        """Bias-corrected update of every parameter of ``model`` from its gradients."""
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for prefix, mod in model.modules():
            for name, p in mod.params.items():
                key = prefix + name
                g = mod.grads[name]
                if key not in self.m:
                    self.m[key] = np.zeros_like(p)
                    self.v[key] = np.zeros_like(p)
                m, v = self.m[key], self.v[key]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * (g * g)
                p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(model, optim: Adam) -> None:
    optim.step(model)


# metrics ------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    iou: float
    f1: float
    precision: float
    recall: float

    def row(self):
        return (self.iou, self.f1, self.precision, self.recall)


def confusion_counts(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5):
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p = pred >= threshold
    g = gt > 0.5
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn


def metrics_from_counts(tp: int, fp: int, fn: int) -> Metrics:
    if tp + fp + fn == 0:
        return Metrics(1.0, 1.0, 1.0, 1.0)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return Metrics(
        iou=tp / (tp + fp + fn),
        f1=2 * tp / (2 * tp + fp + fn),
        precision=precision,
        recall=recall,
    )


def compute_metrics(pred_mask: np.ndarray, gt_mask: np.ndarray, threshold: float = 0.5) -> Metrics:
    """Pixelwise IoU, F1, precision and recall after thresholding ``pred_mask``.

    When both the thresholded prediction and the ground truth are empty every
    metric is 1.
    """
    return metrics_from_counts(*confusion_counts(pred_mask, gt_mask, threshold))


# loops --------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    loss: float
    steps: int


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epoch(model, images, masks, optim: Adam, seed: int, epoch: int = 0,
                batch_size: int = 8, dice_weight: float = 0.0) -> EpochStats:
    """One shuffled pass over ``images``/``masks`` with an Adam step per batch."""
    model.train()
    rng = np.random.default_rng([seed, epoch])
    total, count = 0.0, 0
    for step, idx in enumerate(iterate_batches(len(images), batch_size, rng)):
        x, y = images[idx], masks[idx]
        if len(idx) == 1:
            # Batch norm needs more than one value per channel at the bottleneck.
            continue
        model.zero_grad()
        pred = model.forward(x)
        loss, grad = bce_loss(pred, y)
        if dice_weight:
            dl, dg = dice_loss(pred, y)
            loss += dice_weight * dl
            grad = grad + dice_weight * dg
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss at epoch {epoch} step {step}")
        model.backward(grad)
        optim.step(model)
        total += loss * len(idx)
        count += len(idx)
    return EpochStats(epoch, total / max(count, 1), count)


def predict(model, images, batch_size: int = 16) -> np.ndarray:
    model.eval()
    outs = [model.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate(model, images, masks, threshold: float = 0.5, batch_size: int = 16) -> Metrics:
    """Eval-mode metrics micro-averaged over every pixel of every sample."""
    model.eval()
    tp = fp = fn = 0
    for i in range(0, len(images), batch_size):
        pred = model.forward(images[i:i + batch_size])
        a, b, c = confusion_counts(pred, masks[i:i + batch_size], threshold)
        tp, fp, fn = tp + a, fp + b, fn + c
    return metrics_from_counts(tp, fp, fn)


def fit(model, images, masks, epochs: int, seed: int, lr: float = 1e-3, batch_size: int = 8,
        eval_images=None, eval_masks=None, threshold: float = 0.5, dice_weight: float = 0.0,
        csv_path=None, stop_iou: float | None = None):
    """Train for ``epochs`` epochs, evaluating after each.

    Returns ``(history, optim)`` where history holds one
    ``(epoch, loss, Metrics)`` tuple per epoch.  ``stop_iou`` ends training
    once the eval IoU reaches that value.
    """
    if eval_images is None:
        eval_images, eval_masks = images, masks
    optim = Adam(lr=lr)
    history = []
    fh = open(csv_path, "w", newline="") if csv_path else None
    try:
        writer = csv.writer(fh, lineterminator="\n") if fh else None
        if writer:
            writer.writerow(CSV_HEADER)
        for epoch in range(1, epochs + 1):
            stats = train_epoch(model, images, masks, optim, seed, epoch, batch_size, dice_weight)
            metrics = evaluate(model, eval_images, eval_masks, threshold)
            history.append((epoch, stats.loss, metrics))
            log.info("epoch %d loss %.5f iou %.4f f1 %.4f", epoch, stats.loss, metrics.iou, metrics.f1)
            if writer:
                writer.writerow([epoch] + [f"{v:.6f}" for v in (stats.loss, *metrics.row())])
                fh.flush()
            if stop_iou is not None and metrics.iou >= stop_iou:
                break
    finally:
        if fh:
            fh.close()
    return history, optim


# gradient checking ----------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """``|a - n| / (|a| + |n|)`` over the checked entries, with an absolute floor.

    The floor keeps structurally-zero gradients (for example a key bias under
    softmax shift invariance) from turning finite-difference noise into a
    large ratio.
    """
    a = np.ravel(analytic).astype(np.float64)
    n = np.ravel(numeric).astype(np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


def grad_check(module, x: np.ndarray, tolerance: float = 1e-4, h: float = 1e-5,
               max_exhaustive: int = 64, probes: int = 3, seed: int = 0,
               check_input: bool = True, kink_retries: int = 2) -> dict:
    """Compare analytic gradients of ``module`` with central finite differences.

    The module is deep-copied and promoted to float64.  The scalar objective
    is ``sum(module(x) * R)`` for a fixed random ``R``.  Tensors with at most
    ``max_exhaustive`` elements are checked entry by entry; larger ones get
    ``probes`` random coordinates plus one random-direction derivative.

    A probe whose forward and backward one-sided slopes disagree has stepped
    over a ReLU/max kink; it is repeated with ``h / 10`` up to
    ``kink_retries`` times.

    Returns ``{"errors": {name: rel_err}, "max_error": float, "passed": bool,
    "tolerance": tolerance}``.  Failures are report entries, never exceptions.
    """
    mod = copy.deepcopy(module).astype(np.float64)
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    mod.zero_grad()
    f0 = mod.forward(x)
    weights = rng.standard_normal(f0.shape)
    dx = mod.backward(weights)
    f0 = mod.forward(x)
    grads = dict(mod.named_grads())
    tensors = list(mod.named_parameters())
    analytic = {name: grads[name].copy() for name, _ in tensors}
    if check_input:
        tensors.append(("input", x))
        analytic["input"] = dx

    def slope(a, b, step):
        # Difference the outputs before reducing; summing first loses digits.
        return float(np.sum((a - b) * weights)) / step

    def numeric(arr, direction):
        base = arr.copy()
        step = h
        for attempt in range(kink_retries + 1):
            arr[...] = base + step * direction
            fp = mod.forward(x)
            arr[...] = base - step * direction
            fm = mod.forward(x)
            arr[...] = base
            fwd, bwd = slope(fp, f0, step), slope(f0, fm, step)
            if abs(fwd - bwd) <= 1e-4 * (abs(fwd) + abs(bwd)) + 1e-6:
                break
            step /= 10
        return 0.5 * (fwd + bwd)

    errors = {}
    for name, arr in tensors:
        a_vals, n_vals = [], []
        if arr.size <= max_exhaustive:
            coords = list(np.ndindex(arr.shape))
        else:
            flat = rng.choice(arr.size, size=probes, replace=False)
            coords = [np.unravel_index(i, arr.shape) for i in flat]
        for idx in coords:
            direction = np.zeros_like(arr)
            direction[idx] = 1.0
            a_vals.append(analytic[name][idx])
            n_vals.append(numeric(arr, direction))
        if arr.size > max_exhaustive:
            direction = rng.standard_normal(arr.shape)
            direction /= np.linalg.norm(direction)
            a_vals.append(np.sum(analytic[name] * direction))
            n_vals.append(numeric(arr, direction))
        errors[name] = relative_error(np.array(a_vals), np.array(n_vals))
    max_error = max(errors.values()) if errors else 0.0
    return {"errors": errors, "max_error": max_error, "passed": max_error < tolerance,
            "tolerance": tolerance}

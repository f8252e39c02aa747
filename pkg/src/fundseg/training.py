"""Toy training driver: data split, Adam with decoupled weight decay, model selection."""

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import maskhead as mh
from . import metrics
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, TrainingError
from .losses import AlphaSchedule, alpha_at, mask_loss

log = logging.getLogger(__name__)

# Shipped fixture for the skip-type comparison and the segmentation-quality check.
TOY_SEED = 0
TOY_CASES = 200
TOY_ITERATIONS = 40


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 450
    passes: int = 100
    batch_size: int = 8
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    schedule: AlphaSchedule = AlphaSchedule()
    model: mh.MaskHeadConfig = mh.MaskHeadConfig()
    split: tuple = (0.7, 0.2, 0.1)
    seed: int = 0
    strict_paper_loss: bool = False
    eval_batch: int = 20

    def __post_init__(self):
        if any(r <= 0 for r in self.split) or sum(self.split) > 1 + 1e-12:
            raise ConfigurationError(f"split ratios must be positive and sum to <= 1, got {self.split}")
        if self.iterations < 1 or self.passes < 1 or self.batch_size < 1:
            raise ConfigurationError("iterations, passes and batch size must be positive")
        if self.learning_rate < 0:
            raise ConfigurationError("learning rate must be >= 0")

    @classmethod
    def toy(cls, skip_type="t3", seed=TOY_SEED, iterations=TOY_ITERATIONS, **kw):
        """Desk-scale protocol: 10 passes per iteration and a period-1 alpha
        ramp that still ends at 0.26 on the last iteration."""
        model = mh.MaskHeadConfig(skip_type=skip_type)
        defaults = dict(iterations=iterations, passes=10, learning_rate=0.01,
                        schedule=AlphaSchedule.spanning(iterations), model=model, seed=seed)
        defaults.update(kw)
        return cls(**defaults)


@dataclass
class LogRecord:
    iteration: int
    alpha: float
    train_loss: float
    val_loss: float
    wall: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_iteration: int = -1

    HEADER = ("iteration", "alpha", "train_loss", "val_loss", "wall")

    def rows(self):
        return [(r.iteration, r.alpha, r.train_loss, r.val_loss, r.wall) for r in self.records]

    def deterministic_rows(self):
        return [(r.iteration, r.alpha, r.train_loss, r.val_loss) for r in self.records]


def split_dataset(cases, ratios=(0.7, 0.2, 0.1), seed=0):
    """Seeded shuffle, then floor(n * ratio) for train and validation; the rest is holdout."""
    cases = list(cases)
    n = len(cases)
    if n < 3:
        raise ConfigurationError(f"need at least 3 cases to split, got {n}")
    if len(ratios) < 2 or any(r <= 0 for r in ratios) or sum(ratios) > 1 + 1e-12:
        raise ConfigurationError(f"invalid split ratios {ratios}")
    order = np.random.default_rng(seed).permutation(n)
    # small epsilon guards floor(10 * 0.7) style products that land just below an integer
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    if any(len(p) == 0 for p in parts):
        raise ConfigurationError(
            f"split of {n} cases by {ratios} leaves an empty partition "
            f"({len(parts[0])}/{len(parts[1])}/{len(parts[2])})")
    return tuple([cases[i] for i in p] for p in parts)


def stack_cases(cases):
    """(N,1,H,W) images and (N,2,H,W) {0,1} disc/cup targets."""
    x = np.stack([c.image for c in cases])[:, None].astype(np.float64)
    y = np.stack([np.stack([c.disc_mask, c.cup_mask]) for c in cases]).astype(np.float64) / 255.0
    return x, y


def batch_loss(pred, target, alpha, strict_paper=False):
    """Mean over classes of the mask loss on one (N, classes, H, W) batch."""
    classes = pred.shape[1]
    total = None
    for c in range(classes):
        term = mask_loss(pred[:, c], target[:, c], alpha, strict_paper)
        total = term if total is None else total + term
    return total * (1.0 / classes)


def predict(model, x, chunk=20):
    """Probabilities for an (N,C,H,W) array, evaluated in chunks without a tape."""
    out = []
    with ad.no_grad():
        for i in range(0, len(x), chunk):
            out.append(mh.forward(model, Tensor(x[i:i + chunk])).data)
    return np.concatenate(out)


def dataset_loss(model, x, y, alpha, strict_paper=False, chunk=20):
    p = predict(model, x, chunk)
    with ad.no_grad():
        return batch_loss(Tensor(p), y, alpha, strict_paper).item()


class Adam:
    """Adam with decoupled weight decay (AdamW form)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p.data
            # fresh array: tensors on an old tape keep their saved values
            p.data = p.data - self.lr * update
            p.grad = None


def train(config, cases, log_every=0):
    """Train a mask head; return (best-validation model, TrainLog, split)."""
    train_set, val_set, hold_set = split_dataset(cases, config.split, config.seed)
    if len(train_set) < config.batch_size:
        raise ConfigurationError(
            f"batch size {config.batch_size} exceeds training set size {len(train_set)}")
    xt, yt = stack_cases(train_set)
    xv, yv = stack_cases(val_set)
    model = mh.build(config.model, seed=config.seed)
    params = model.parameters()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2,
               config.adam_eps, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    tlog = TrainLog()
    best_val = math.inf
    best_params = [p.data.copy() for p in params]
    start = time.perf_counter()
    last_finite = -1

    for it in range(config.iterations):
        alpha = alpha_at(config.schedule, it)
        running = []
        for _ in range(config.passes):
            idx = rng.choice(len(xt), size=config.batch_size, replace=False)
            pred = mh.forward(model, Tensor(xt[idx]))
            loss = batch_loss(pred, yt[idx], alpha, config.strict_paper_loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss at iteration {it}; "
                                    f"last finite iteration {last_finite}", last_finite)
            ad.backward(loss)
            opt.step()
            running.append(value)
        val = dataset_loss(model, xv, yv, alpha, config.strict_paper_loss, config.eval_batch)
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at iteration {it}; "
                                f"last finite iteration {last_finite}", last_finite)
        last_finite = it
        tlog.records.append(LogRecord(it, alpha, float(np.mean(running)), val,
                                      time.perf_counter() - start))
        if val < best_val:
            best_val = val
            tlog.best_iteration = it
            best_params = [p.data.copy() for p in params]
        if log_every and (it % log_every == 0 or it == config.iterations - 1):
            log.info("iter %d alpha %.4f train %.5f val %.5f", it, alpha, running[-1], val)

    best = model.with_parameters([Tensor(d, requires_grad=True) for d in best_params])
    return best, tlog, (train_set, val_set, hold_set)


def evaluate_model(model, cases, threshold=127, chunk=20):
    """Per-class list of per-image MetricsReports and their aggregates."""
    x, _ = stack_cases(cases)
    probs = predict(model, x, chunk)
    per_class = {"disc": [], "cup": []}
    for i, case in enumerate(cases):
        masks = mh.predict_mask(probs[i], threshold)
        per_class["disc"].append(metrics.evaluate(masks[0], case.disc_mask))
        per_class["cup"].append(metrics.evaluate(masks[1], case.cup_mask))
    return per_class, {k: metrics.aggregate(v) for k, v in per_class.items()}


def skip_compare(cases, seed=TOY_SEED, iterations=TOY_ITERATIONS, log_every=0, **kw):
    """Train T1/T2/T3 on the same data and seed; return {skip: (model, log)}."""
    out = {}
    for skip in mh.SkipType:
        cfg = TrainConfig.toy(skip_type=skip, seed=seed, iterations=iterations, **kw)
        model, tlog, _ = train(cfg, cases, log_every)
        out[skip] = (model, tlog)
    return out


# --------------------------------------------------------------------------
# resize / zero-pad preprocessing

@dataclass(frozen=True)
class Placement:
    scale: float
    orig_shape: tuple
    scaled_shape: tuple
    top: int
    left: int
    max_dim: int


def _bilinear(img, out_h, out_w):
    """Half-pixel-center bilinear resample of the last two axes."""
    h, w = img.shape[-2:]
    if (out_h, out_w) == (h, w):
        return img.copy()

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = coords(out_h, h)
    c0, c1, fc = coords(out_w, w)
    top = img[..., r0, :] * (1 - fr)[:, None] + img[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


def resize_pad(image, max_dim=1024):
    """Downscale so max(H, W) <= max_dim, then zero-pad symmetrically to max_dim x max_dim."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    h, w = arr.shape[-2:]
    if h < 1 or w < 1:
        raise ContractError(f"image must have positive dimensions, got {arr.shape}")
    s = max_dim / max(h, w) if max(h, w) > max_dim else 1.0
    nh, nw = (h, w) if s == 1.0 else (max(1, int(round(h * s))), max(1, int(round(w * s))))
    scaled = _bilinear(arr, nh, nw)
    out = np.zeros(arr.shape[:-2] + (max_dim, max_dim))
    top, left = (max_dim - nh) // 2, (max_dim - nw) // 2
    out[..., top:top + nh, left:left + nw] = scaled
    return Tensor(out), Placement(s, (h, w), (nh, nw), top, left, max_dim)


def unplace_mask(mask, placement):
    """Map a mask on the padded canvas back to the original image grid."""
    nh, nw = placement.scaled_shape
    crop = np.asarray(mask)[..., placement.top:placement.top + nh, placement.left:placement.left + nw]
    h, w = placement.orig_shape
    if (nh, nw) == (h, w):
        return crop.copy()
    rows = np.minimum((np.arange(h) * nh) // h, nh - 1)
    cols = np.minimum((np.arange(w) * nw) // w, nw - 1)
    return crop[..., rows[:, None], cols[None, :]]


def with_schedule(config, alpha0=None, step=None, period=None):
    sch = config.schedule
    sch = replace(sch,
                  initial=sch.initial if alpha0 is None else alpha0,
                  decrement=sch.decrement if step is None else step,
                  period=sch.period if period is None else period)
    return replace(config, schedule=sch)

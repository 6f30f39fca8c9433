"""Training, inference and the three-view segmentation pipeline."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nn
from .biclstm import BiCLSTM, RefinerConfig, refine_volume, train_refiner
from .checkpoint import load_into, read_manifest, save_checkpoint
from .loss import LossWeights, clamp_prediction, loss_gradient, total_loss
from .metrics import MetricReport, evaluate_case, fuse_maps
from .unet import StackUNet, UNetConfig
from .volume import (VIEWS, Volume, augment, bbox_center, crop_origin, crop_to, extract_all, generate_phantom,
                     inverse_view, load_volume, merge_stacks, plan_stacks, save_volume, transpose_view)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    k: int = 7
    lambda_v: float = 0.5
    lambda_s: float = 0.5
    lr: float = 1e-3
    momentum: float = 0.99
    batch_size: int = 1
    epochs: int = 40
    refiner_epochs: int = 150
    refiner_lr: float = 1e-3
    refiner_select: bool = True
    thr: float = 0.5
    seed: int = 0
    base_channels: int = 16
    depth: int = 4
    refiner_hidden: int = 8
    views: tuple = VIEWS
    augment: bool = True
    train_margin: int | None = 3
    use_refiner: bool = True
    dtype: str = "f64"

    def __post_init__(self):
        self.views = tuple(self.views)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.train_margin is not None and self.train_margin < 0:
            raise ValueError("train_margin must be >= 0 or None")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.views or any(v not in VIEWS for v in self.views):
            raise ValueError(f"views must be a non-empty subset of {VIEWS}")
        if not 0 < self.thr < 1:
            raise ValueError("thr must lie in (0, 1)")
        self.weights  # validates the coefficients

    @property
    def weights(self):
        return LossWeights(self.lambda_v, self.lambda_s)

    def unet_config(self, extents):
        return UNetConfig(self.k, self.base_channels, self.depth, tuple(extents), self.dtype)

    def refiner_config(self):
        return RefinerConfig(hidden_channels=self.refiner_hidden, dtype=self.dtype)

    def to_dict(self):
        d = asdict(self)
        d["views"] = list(self.views)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config_file(path):
    """Read ``key = value`` lines (values parsed as JSON where possible; '#' comments)."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: expected 'key = value', got {raw!r}")
        value = value.strip()
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = [v.strip() for v in value.split(",")] if "," in value else value
        out[key.strip()] = parsed
    return out


@dataclass
class Case:
    case_id: str
    image: np.ndarray
    label: np.ndarray
    spacing: tuple | None = None


CASE_LIST = "cases.txt"


def save_cases(cases, directory):
    """Write ``<id>_image`` / ``<id>_label`` volume files plus a case list."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for c in cases:
        save_volume(directory / f"{c.case_id}_image", Volume(c.image, "image", c.spacing))
        save_volume(directory / f"{c.case_id}_label", Volume(c.label, "label", c.spacing))
    (directory / CASE_LIST).write_text("".join(f"{c.case_id}\n" for c in cases))
    return directory


def load_cases(directory):
    directory = Path(directory)
    listing = directory / CASE_LIST
    if not listing.exists():
        raise FileNotFoundError(f"{directory} has no {CASE_LIST}")
    cases = []
    for case_id in listing.read_text().split():
        img = load_volume(directory / f"{case_id}_image")
        lab = load_volume(directory / f"{case_id}_label")
        cases.append(Case(case_id, img.voxels.astype(np.float64), lab.voxels, img.spacing))
    return cases


def phantom_cases(n, seed, dims=(32, 64, 64), shape_variability=1.0, prefix="case"):
    """``n`` phantom cases with seeds ``seed, seed+1, ...``."""
    out = []
    for i in range(n):
        img, lab = generate_phantom(seed + i, dims, shape_variability)
        out.append(Case(f"{prefix}{i:03d}", img.voxels, lab.voxels))
    return out


def _rng(seed, *tags):
    return np.random.default_rng([int(seed)] + [int(t) for t in tags])


def _view_index(view):
    return VIEWS.index(view)


# ----------------------------------------------------------------------------
# per-view data
# ----------------------------------------------------------------------------

def view_arrays(image, label, view, extents=None):
    """Transpose to ``view`` and crop in-plane to ``extents`` around the label box."""
    img = transpose_view(image, view)
    lab = transpose_view(label, view) if label is not None else None
    if extents is not None and img.shape[1:] != tuple(extents):
        center = bbox_center(lab) if lab is not None else None
        img = crop_to(img, *extents, center=center)
        if lab is not None:
            lab = crop_to(lab, *extents, center=center)
    return img, lab


def label_slice_range(label, margin=None):
    """``(start, stop)`` of the slices holding foreground, widened by ``margin``.

    ``margin=None`` or an empty label gives the whole volume.
    """
    d = len(label)
    filled = np.flatnonzero(np.asarray(label).reshape(d, -1).any(axis=1))
    if margin is None or filled.size == 0:
        return 0, d
    return max(0, int(filled[0]) - margin), min(d, int(filled[-1]) + 1 + margin)


def _stack_units(cases, view, k, extents, margin=None):
    """All (image stack, label stack) training units of a view.

    With a ``margin`` only the labelled slice range (plus margin) is used,
    which keeps mostly-empty stacks out of the coronal and sagittal sets.
    """
    units = []
    for case in cases:
        img, lab = view_arrays(case.image, case.label, view, extents)
        if len(img) < k:
            continue
        lo, hi = label_slice_range(lab, margin)
        if hi - lo < k:  # widen short ranges to one full stack
            lo = max(0, min(lo, len(img) - k))
            hi = lo + k
        img, lab = img[lo:hi], lab[lo:hi]
        plan = plan_stacks(img.shape[0], k)
        units.extend(zip(extract_all(img, plan), extract_all(lab.astype(float), plan)))
    return units


def view_extents(cases, view):
    shapes = {transpose_view(c.image, view).shape[1:] for c in cases}
    return min(shapes)


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: StackUNet
    history: list
    step_losses: list = field(default_factory=list)


def train_unet(cases, config, view="axial", extents=None, checkpoint_dir=None, progress=None,
               max_steps=None):
    """SGD-momentum training of one view's Stack-U-Net on the total stack energy.

    One epoch visits every stack of every training volume once, in a seeded
    random order.  With ``checkpoint_dir`` the model is saved after each epoch.
    """
    if not cases:
        raise ValueError("training needs at least one case")
    extents = tuple(extents or view_extents(cases, view))
    ucfg = config.unet_config(extents)
    vi = _view_index(view)
    model = StackUNet(ucfg, _rng(config.seed, vi, 0))
    order_rng = _rng(config.seed, vi, 1)
    aug_rng = _rng(config.seed, vi, 2)
    units = _stack_units(cases, view, config.k, extents, config.train_margin)
    if not units:
        raise ValueError(f"no {view} training stacks of depth {config.k}")
    weights = config.weights
    history, step_losses = [], []
    last_ckpt = None
    steps = 0
    model.set_train(True)
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(units))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [units[i] for i in order[start : start + config.batch_size]]
            if config.augment:
                batch = [augment(x, y, None, aug_rng) for x, y in batch]
            xs = np.stack([x for x, _ in batch])
            ys = np.stack([y for _, y in batch])
            try:
                out = model.forward(xs)
            except nn.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_ckpt) from exc
            pred, passed = clamp_prediction(out)
            value = total_loss(zip(pred, ys), weights)
            if not np.isfinite(value.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_ckpt)
            grad = np.stack([loss_gradient(p, y, weights, len(batch)) for p, y in zip(pred, ys)])
            model.zero_grad()
            model.backward(grad * passed)
            try:
                nn.sgd_momentum_step(model.parameters(), config.lr, config.momentum)
            except nn.NonFiniteError as exc:
                raise TrainingDiverged(str(exc), last_ckpt) from exc
            epoch_losses.append(value.total)
            step_losses.append(value.total)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        history.append(float(np.mean(epoch_losses)))
        if checkpoint_dir is not None:
            last_ckpt = save_checkpoint(model, Path(checkpoint_dir) / f"unet_{view}", model.kind,
                                        {"unet": ucfg.to_dict(), "view": view, "epoch": epoch + 1})
        if progress is not None:
            progress(view, epoch, history[-1])
        if max_steps is not None and steps >= max_steps:
            break
    model.set_train(False)
    return TrainResult(model, history, step_losses)


def overfit(model, stack, label, weights, steps=200, lr=0.1, momentum=0.9):
    """Repeated SGD steps on one fixed (stack, label) pair; returns the per-step L_t.

    A sanity check that the network and the analytic loss gradient can drive the
    energy to zero.  The default step size is far above the training default
    because 200 steps at 1e-3 do not leave the initial plateau.
    """
    stack = np.asarray(stack)
    label = np.asarray(label, dtype=float)
    model.set_train(True)
    history = []
    for _ in range(steps):
        pred, passed = clamp_prediction(model.forward(stack))
        history.append(total_loss([(pred, label)], weights).total)
        model.zero_grad()
        model.backward(loss_gradient(pred, label, weights) * passed)
        nn.sgd_momentum_step(model.parameters(), lr, momentum)
    model.set_train(False)
    return history


# ----------------------------------------------------------------------------
# inference
# ----------------------------------------------------------------------------

def predict(model, image, view="axial"):
    """Probability volume in the axial frame for one view's model.

    The volume is re-sliced for ``view``, cut into stacks, run through the
    network in eval mode and merged back (overlapping slices averaged).
    """
    image = np.asarray(image)
    k = model.config.k
    extents = model.config.extents
    img = transpose_view(image, view)
    full_inplane = img.shape[1:]
    origin = None
    if full_inplane != extents:
        origin = crop_origin(full_inplane, *extents)
        img = crop_to(img, *extents)
    plan = plan_stacks(img.shape[0], k)
    model.set_train(False)
    outs = [model.forward(s).astype(np.float64) for s in extract_all(img, plan)]
    prob = merge_stacks(outs, plan)
    if origin is not None:
        full = np.zeros(img.shape[:1] + full_inplane)
        y0, x0 = origin
        full[:, y0 : y0 + extents[0], x0 : x0 + extents[1]] = prob
        prob = full
    return inverse_view(prob, view)


@dataclass
class MDSNet:
    """Trained per-view networks plus the optional refiner."""
    config: TrainConfig
    view_models: dict
    refiner: BiCLSTM | None = None
    histories: dict = field(default_factory=dict)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {}
        for view, model in self.view_models.items():
            paths[view] = save_checkpoint(model, directory / f"unet_{view}", model.kind,
                                          {"unet": model.config.to_dict(), "view": view})
        if self.refiner is not None:
            paths["refiner"] = save_checkpoint(self.refiner, directory / "refiner", self.refiner.kind,
                                               {"refiner": self.refiner.config.to_dict()})
        (directory / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        (directory / "history.json").write_text(json.dumps(self.histories, indent=2, sort_keys=True) + "\n")
        return paths

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        config = TrainConfig.from_dict(json.loads((directory / "config.json").read_text()))
        view_models = {}
        for view in config.views:
            info = read_manifest(directory / f"unet_{view}")
            ucfg = UNetConfig(**info["config"]["unet"])
            model = StackUNet(ucfg, np.random.default_rng(0))
            load_into(model, directory / f"unet_{view}", StackUNet.kind)
            model.set_train(False)
            view_models[view] = model
        refiner = None
        if (directory / "refiner.manifest").exists():
            info = read_manifest(directory / "refiner")
            refiner = BiCLSTM(RefinerConfig(**info["config"]["refiner"]), np.random.default_rng(0))
            load_into(refiner, directory / "refiner", BiCLSTM.kind)
        histories = {}
        if (directory / "history.json").exists():
            histories = json.loads((directory / "history.json").read_text())
        return cls(config, view_models, refiner, histories)


@dataclass
class PipelineOutput:
    fused: np.ndarray
    refined: np.ndarray
    mask: np.ndarray
    view_probs: dict


def run_pipeline(image, view_models, refiner, config, views=None):
    """Per-view prediction, fusion in the axial frame, optional refinement, threshold."""
    views = tuple(views or config.views)
    if not views:
        raise ValueError("at least one view is required")
    missing = [v for v in views if v not in view_models]
    if missing:
        raise KeyError(f"no model for view(s) {missing}")
    probs = {v: predict(view_models[v], image, v) for v in views}
    fused = fuse_maps(probs, config.thr).mean_prob
    refined = refine_volume(refiner, fused) if refiner is not None else fused
    return PipelineOutput(fused, refined, (refined >= config.thr).astype(np.uint8), probs)


def fit(cases, config, workdir=None, progress=None):
    """Train every configured view, then the refiner on fused training predictions."""
    view_models, histories = {}, {}
    for view in config.views:
        t0 = time.perf_counter()
        ckpt = Path(workdir) / "checkpoints" if workdir is not None else None
        res = train_unet(cases, config, view, checkpoint_dir=ckpt, progress=progress)
        view_models[view] = res.model
        histories[view] = res.history
        log.info("view %s trained in %.1fs, final loss %.4f", view, time.perf_counter() - t0, res.history[-1])
    refiner = None
    if config.use_refiner:
        refiner = BiCLSTM(config.refiner_config(), _rng(config.seed, 9, 0))
        pairs = [(run_pipeline(c.image, view_models, None, config).fused, c.label) for c in cases]
        histories["refiner"] = train_refiner(refiner, pairs, config.refiner_epochs, config.refiner_lr,
                                             config.momentum, _rng(config.seed, 9, 1),
                                             select_thr=config.thr if config.refiner_select else None)
        if config.refiner_select:
            histories["refiner_selected_epoch"] = [refiner.selected_epoch]
    model = MDSNet(config, view_models, refiner, histories)
    if workdir is not None:
        model.save(Path(workdir) / "model")
    return model


def evaluate(model, cases, use_refiner=True, views=None):
    """Per-case metrics of the pipeline on ``cases``."""
    refiner = model.refiner if use_refiner else None
    report = MetricReport()
    for c in cases:
        out = run_pipeline(c.image, model.view_models, refiner, model.config, views)
        report.cases.append(evaluate_case(out.mask, c.label, c.case_id, c.spacing))
    return report


def with_overrides(config, **kw):
    return replace(config, **kw)

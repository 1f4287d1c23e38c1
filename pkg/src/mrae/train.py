"""Desk-scale training harness: heatmap localization on synthetic small objects."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backbone import Backbone, BackboneConfig, random_level
from .data import SyntheticSample, Target
from .fusion import (
    FUSION_KINDS,
    AttentionWeights,
    FusionParams,
    fuse,
    hard_attention,
    mrae_weights,
    one_hot,
    soft_attention_weights,
)
from .ops import conv2d
from .optim import SGDMomentum
from .tensor import NonFiniteError, Parameter, Tensor, mean, square

HEATMAP_STRIDE = 4


class TrainingDiverged(RuntimeError):
    pass


FINETUNE_BASE_LR = 3e-4
DESK_BASE_LR = 3e-2


def three_segment_schedule(steps: int, base_lr: float) -> list[tuple[int, float]]:
    """60% / 30% / 10% of ``steps`` at ``base_lr``, ``base_lr/10``, ``base_lr/100``."""
    a = int(round(0.6 * steps))
    b = int(round(0.3 * steps))
    return [(a, base_lr), (b, base_lr / 10), (steps - a - b, base_lr / 100)]


def finetune_schedule(steps: int) -> list[tuple[int, float]]:
    """3e-4 / 3e-5 / 3e-6, the fine-tuning rates for a pretrained backbone."""
    return three_segment_schedule(steps, FINETUNE_BASE_LR)


def default_schedule(steps: int) -> list[tuple[int, float]]:
    # from-scratch toy models do not leave initialization within 1000 steps at 3e-4
    return three_segment_schedule(steps, DESK_BASE_LR)


@dataclass
class TrainConfig:
    fusion: str = "mrae"
    template: Optional[int] = None
    hard_level: Optional[int] = None  # None -> seeded random choice for fusion="hard"
    steps: int = 1000
    seed: int = 0
    lr_schedule: Optional[list[tuple[int, float]]] = None
    momentum: float = 0.9
    switch_template_at: Optional[tuple[int, int]] = None  # (step, new_template)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    n_classes: int = 3
    d_embed: int = 32
    upsample_mode: str = "bilinear"
    sigma: float = 1.5
    dtype: str = "float64"

    def __post_init__(self):
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.fusion == "mrae":
            if self.template is None:
                self.template = 2
            if self.template not in (1, 2, 3):
                raise ValueError(f"template must be 1, 2 or 3, got {self.template}")
        elif self.template is not None:
            raise ValueError("template is only meaningful with fusion='mrae'")
        if self.switch_template_at is not None:
            if self.fusion != "mrae":
                raise ValueError("switch_template_at requires fusion='mrae'")
            step, new = self.switch_template_at
            if new not in (1, 2, 3) or step < 0:
                raise ValueError(f"invalid template switch {self.switch_template_at}")
            self.switch_template_at = (int(step), int(new))
        if self.fusion == "hard":
            if self.hard_level is None:
                self.hard_level = random_level(self.seed)
            if self.hard_level not in (1, 2, 3):
                raise ValueError(f"hard_level must be 1, 2 or 3, got {self.hard_level}")
        elif self.hard_level is not None:
            raise ValueError("hard_level is only meaningful with fusion='hard'")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.lr_schedule is None:
            self.lr_schedule = default_schedule(self.steps)
        self.lr_schedule = [(int(n), float(lr)) for n, lr in self.lr_schedule]
        lrs = [lr for _, lr in self.lr_schedule]
        if any(lr < 0 for lr in lrs) or any(b > a for a, b in zip(lrs, lrs[1:])):
            raise ValueError(f"learning rates must be non-negative and non-increasing: {lrs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def lr_at(self, step: int) -> float:
        acc = 0
        for n, lr in self.lr_schedule:
            acc += n
            if step < acc:
                return lr
        return self.lr_schedule[-1][1] if self.lr_schedule else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["backbone"].items()}
        return d


class AttentionDetector:
    """Backbone + fusion + 1x1 heatmap head."""

    def __init__(self, config: TrainConfig):
        self.config = config
        dtype = np.dtype(config.dtype)
        seeds = np.random.SeedSequence(config.seed).generate_state(3)
        bb_cfg = BackboneConfig(
            channels=config.backbone.channels,
            blocks_per_level=config.backbone.blocks_per_level,
            stem_channels=config.backbone.stem_channels,
            seed=int(seeds[0]),
        )
        self.backbone = Backbone(bb_cfg, dtype=dtype)
        self.fusion = FusionParams(
            bb_cfg.channels,
            template=config.template or 1,
            d_embed=config.d_embed,
            upsample_mode=config.upsample_mode,
            seed=int(seeds[1]),
            dtype=dtype,
        )
        rng = np.random.default_rng(int(seeds[2]))
        c3 = bb_cfg.channels[2]
        self.head = {
            "weight": Parameter(rng.standard_normal((config.n_classes, c3, 1, 1)) * np.sqrt(1.0 / c3), "head.weight", dtype),
            "bias": Parameter(np.zeros(config.n_classes), "head.bias", dtype),
        }

    @property
    def template(self) -> Optional[int]:
        return self.fusion.template if self.config.fusion == "mrae" else None

    def set_template(self, template: int) -> None:
        if template not in (1, 2, 3):
            raise ValueError(f"template must be 1, 2 or 3, got {template}")
        self.fusion.template = template

    def parameters(self) -> list[Parameter]:
        return self.backbone.parameters() + self.fusion.parameters() + list(self.head.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def attention(self, image: Tensor) -> tuple[Tensor, AttentionWeights]:
        levels = self.backbone(image)
        kind = self.config.fusion
        if kind == "soft":
            weights = soft_attention_weights(levels, self.fusion)
        elif kind == "mrae":
            weights = mrae_weights(levels, self.fusion)
        else:
            weights = one_hot(self.config.hard_level, image.dtype)
            return hard_attention(levels, self.config.hard_level, self.fusion), weights
        return fuse(levels, weights, self.fusion), weights

    def __call__(self, image: Tensor) -> tuple[Tensor, AttentionWeights]:
        amap, weights = self.attention(image)
        return build_head(amap, self.head["weight"], self.head["bias"]), weights


def build_head(attention_map: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1x1 conv from the attention map's channels to one heatmap per class."""
    return conv2d(attention_map, weight, bias)


def render_targets(
    targets: Sequence[Target], n_classes: int, grid: tuple[int, int], sigma: float = 1.5, stride: int = HEATMAP_STRIDE
) -> np.ndarray:
    """Gaussian bumps (peak 1) on each target's class channel; overlaps take the max.

    A target at pixel centre ``cx`` maps to grid coordinate ``cx / stride - 0.5``
    so that cell ``j`` is centred on integer ``j``.
    """
    gh, gw = grid
    field_ = np.zeros((n_classes, gh, gw))
    yy, xx = np.mgrid[:gh, :gw]
    for t in targets:
        u, v = t.cx / stride - 0.5, t.cy / stride - 0.5
        if not (-0.5 <= u <= gw - 0.5 and -0.5 <= v <= gh - 0.5):
            raise ValueError(f"target centre ({t.cx}, {t.cy}) falls outside the {gw}x{gh} grid")
        if not 0 <= t.cls < n_classes:
            raise ValueError(f"target class {t.cls} outside [0, {n_classes})")
        bump = np.exp(-((xx - u) ** 2 + (yy - v) ** 2) / (2 * sigma * sigma))
        np.maximum(field_[t.cls], bump, out=field_[t.cls])
    return field_


def heatmap_loss(pred: Tensor, targets: Sequence[Sequence[Target]], sigma: float = 1.5) -> Tensor:
    """Mean squared error between ``pred`` (N, K, H, W) and rendered target fields."""
    n, k, h, w = pred.shape
    if len(targets) != n:
        raise ValueError(f"{len(targets)} target lists for a batch of {n}")
    field_ = np.stack([render_targets(t, k, (h, w), sigma) for t in targets]).astype(pred.dtype)
    return mean(square(pred - Tensor(field_)))


def target_cell(t: Target, stride: int = HEATMAP_STRIDE) -> tuple[int, int]:
    return int(t.cy // stride), int(t.cx // stride)


def localization_hits(heatmap: np.ndarray, targets: Sequence[Target], stride: int = HEATMAP_STRIDE) -> int:
    """Targets whose class-channel argmax lies within one cell (Chebyshev) of their own cell."""
    hits = 0
    for t in targets:
        chan = heatmap[t.cls]
        r, c = np.unravel_index(int(np.argmax(chan)), chan.shape)
        tr, tc = target_cell(t, stride)
        if abs(r - tr) <= 1 and abs(c - tc) <= 1:
            hits += 1
    return hits


@dataclass
class EvalResult:
    localization_score: float
    mean_weights: tuple[float, float, float]
    n_targets: int
    loss: float


def _image_tensor(sample: SyntheticSample, dtype) -> Tensor:
    return Tensor(sample.image[None].astype(dtype))


def evaluate(model: AttentionDetector, dataset: Sequence[SyntheticSample]) -> EvalResult:
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    dtype = np.dtype(model.config.dtype)
    hits = total = 0
    wsum = np.zeros(3)
    loss = 0.0
    for sample in dataset:
        heat, weights = model(_image_tensor(sample, dtype))
        loss += heatmap_loss(heat, [sample.targets], model.config.sigma).item()
        hits += localization_hits(heat.data[0], sample.targets)
        total += len(sample.targets)
        wsum += weights.weights.data
    score = hits / total if total else 0.0
    return EvalResult(score, tuple(float(v) for v in wsum / len(dataset)), total, loss / len(dataset))


def inspect_weights(model: AttentionDetector, dataset: Sequence[SyntheticSample]) -> list[dict]:
    """One ``{image_id, a1, a2, a3, template}`` record per image."""
    dtype = np.dtype(model.config.dtype)
    records = []
    for sample in dataset:
        _, weights = model.attention(_image_tensor(sample, dtype))
        a1, a2, a3 = weights.values
        records.append({"image_id": sample.image_id, "a1": a1, "a2": a2, "a3": a3, "template": model.template})
    return records


@dataclass
class TrainReport:
    config: dict
    losses: list[float] = field(default_factory=list)
    weights: list[tuple[float, float, float]] = field(default_factory=list)
    logits: list[tuple[float, float, float]] = field(default_factory=list)
    templates: list[Optional[int]] = field(default_factory=list)
    step_ms: list[float] = field(default_factory=list)
    localization_score: Optional[float] = None
    untrained_score: Optional[float] = None
    eval_mean_weights: Optional[tuple[float, float, float]] = None
    eval_loss: Optional[float] = None
    model: Optional[AttentionDetector] = field(default=None, repr=False, compare=False)

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None

    def tail_loss(self, n: int = 100) -> Optional[float]:
        """Mean over the last ``n`` steps; single-image losses are noisy."""
        if not self.losses:
            return None
        return float(np.mean(self.losses[-n:]))

    def summary(self) -> dict:
        """Deterministic summary fields (no wall-clock)."""
        w = np.array(self.weights) if self.weights else np.zeros((0, 3))
        return {
            "config": self.config,
            "steps": len(self.losses),
            "final_loss": self.final_loss,
            "tail_loss": self.tail_loss(),
            "eval_loss": self.eval_loss,
            "localization_score": self.localization_score,
            "untrained_score": self.untrained_score,
            "mean_train_weights": [float(v) for v in w.mean(axis=0)] if len(w) else None,
            "eval_mean_weights": list(self.eval_mean_weights) if self.eval_mean_weights else None,
        }


def _weight_norms(model: AttentionDetector) -> str:
    return ", ".join(f"{p.name}={np.linalg.norm(p.data):.3g}" for p in model.parameters())


def train(
    config: TrainConfig,
    dataset: Sequence[SyntheticSample],
    eval_dataset: Optional[Sequence[SyntheticSample]] = None,
    model: Optional[AttentionDetector] = None,
) -> TrainReport:
    """Batch-size-1 momentum SGD over a seeded shuffle of ``dataset``.

    The loss and weights logged for step ``s`` are computed before that step's
    update.  A template switch at step ``s`` takes effect before its forward
    pass and keeps the optimizer state.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    model = model or AttentionDetector(config)
    dtype = np.dtype(config.dtype)
    opt = SGDMomentum(model.parameters(), lr=config.lr_at(0), momentum=config.momentum)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    report = TrainReport(config.to_dict())

    eval_set = eval_dataset if eval_dataset is not None else dataset
    report.untrained_score = evaluate(model, eval_set).localization_score

    order = np.empty(0, dtype=int)
    for step in range(config.steps):
        if config.switch_template_at and step == config.switch_template_at[0]:
            model.set_template(config.switch_template_at[1])
        pos = step % len(dataset)
        if pos == 0:
            order = rng.permutation(len(dataset))
        sample = dataset[order[pos]]

        t0 = time.perf_counter()
        opt.zero_grad()
        try:
            heat, weights = model(_image_tensor(sample, dtype))
            loss = heatmap_loss(heat, [sample.targets], config.sigma)
            loss.backward()
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at step {step} ({exc}); weight norms: {_weight_norms(model)}") from exc
        report.losses.append(loss.item())
        report.weights.append(weights.values)
        report.logits.append(tuple(float(v) for v in weights.logits.data))
        report.templates.append(model.template)
        opt.lr = config.lr_at(step)
        opt.step()
        report.step_ms.append((time.perf_counter() - t0) * 1e3)

    result = evaluate(model, eval_set)
    report.localization_score = result.localization_score
    report.eval_mean_weights = result.mean_weights
    report.eval_loss = result.loss
    report.model = model
    return report

"""Multiresolution fusion of three feature levels into one attention map.

Three strategies share the same alignment path (1x1 conv to the deepest
channel count, then upsampling to level-1 resolution) and differ only in how
the per-level weights are obtained:

* soft attention: per-level 1x1 conv to one channel, global max pool, softmax.
* MRAE: per-level 1x1 conv + global average pool + fc embedding; the template
  level gets logit 1 and the others their cosine similarity to the template
  embedding; softmax.
* hard attention: one-hot weights on a single level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .backbone import FeatureLevels, kaiming
from .ops import conv2d, cosine_similarity, global_avg_pool, global_max_pool, linear, softmax, upsample
from .tensor import Parameter, ShapeError, Tensor, as_tensor, mean, stack

FUSION_KINDS = ("soft", "mrae", "hard")


@dataclass
class AttentionWeights:
    """Normalized per-level weights and the logits they came from."""

    weights: Tensor
    logits: Tensor

    @property
    def values(self) -> tuple[float, float, float]:
        return tuple(float(v) for v in self.weights.data)

    def check(self, tol: float = 1e-12) -> None:
        w = self.weights.data
        if w.shape != (3,) or np.any(w <= 0) or np.any(w >= 1) or abs(w.sum() - 1.0) > tol:
            raise ValueError(f"invalid attention weights {w}")


def one_hot(i: int, dtype=np.float64) -> AttentionWeights:
    if i not in (1, 2, 3):
        raise ValueError(f"level index must be 1, 2 or 3, got {i}")
    w = np.zeros(3, dtype)
    w[i - 1] = 1.0
    # no logits behind a hard choice; the one-hot vector stands in
    return AttentionWeights(Tensor(w), Tensor(w.copy()))


class FusionParams:
    def __init__(
        self,
        channels: Sequence[int],
        template: int = 2,
        d_embed: int = 32,
        upsample_mode: str = "bilinear",
        seed: int = 0,
        dtype=np.float64,
        prefix: str = "fusion",
    ):
        if template not in (1, 2, 3):
            raise ValueError(f"template must be 1, 2 or 3, got {template}")
        if upsample_mode not in ("bilinear", "nearest"):
            raise ValueError(f"unknown upsample mode {upsample_mode!r}")
        self.channels = tuple(channels)
        self.template = template
        self.d_embed = d_embed
        self.upsample_mode = upsample_mode
        rng = np.random.default_rng(seed)
        c3 = self.channels[2]
        self.params: dict[str, Parameter] = {}

        def add(name, data):
            self.params[name] = Parameter(data, f"{prefix}.{name}", dtype=dtype)

        for i, c in enumerate(self.channels, 1):
            add(f"soft{i}.weight", kaiming(rng, (1, c, 1, 1), dtype))
            add(f"soft{i}.bias", np.zeros(1, dtype))
        for i, c in enumerate(self.channels[:2], 1):
            add(f"align{i}.weight", kaiming(rng, (c3, c, 1, 1), dtype))
            add(f"align{i}.bias", np.zeros(c3, dtype))
        for i, c in enumerate(self.channels, 1):
            add(f"embed{i}.conv.weight", kaiming(rng, (d_embed, c, 1, 1), dtype))
            add(f"embed{i}.conv.bias", np.zeros(d_embed, dtype))
            add(f"embed{i}.fc.weight", kaiming(rng, (d_embed, d_embed), dtype))
            add(f"embed{i}.fc.bias", np.zeros(d_embed, dtype))

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())


def _check_levels(levels: FeatureLevels, params: FusionParams) -> None:
    for i, (f, c) in enumerate(zip(levels, params.channels), 1):
        if f.ndim != 4 or f.shape[1] != c:
            raise ShapeError(f"level {i}: expected {c} channels, got shape {f.shape}")
    h, w = levels.f1.shape[2:]
    if levels.f2.shape[2:] != (h // 2, w // 2) or levels.f3.shape[2:] != (h // 4, w // 4):
        raise ShapeError(f"level extents {[f.shape[2:] for f in levels]} are not 1 : 1/2 : 1/4")


def soft_attention_logits(levels: FeatureLevels, params: FusionParams) -> Tensor:
    """Per level: 1x1 conv to one channel, global max pool, mean over the batch."""
    _check_levels(levels, params)
    scalars = []
    for i, f in enumerate(levels, 1):
        pooled = global_max_pool(conv2d(f, params[f"soft{i}.weight"], params[f"soft{i}.bias"]))
        scalars.append(mean(pooled))
    return stack(scalars)


def soft_attention_weights(levels: FeatureLevels, params: FusionParams) -> AttentionWeights:
    logits = soft_attention_logits(levels, params)
    return AttentionWeights(softmax(logits), logits)


def mrae_embeddings(levels: FeatureLevels, params: FusionParams) -> list[Tensor]:
    """(N, d_embed) embedding per level: 1x1 conv, global average pool, fc."""
    _check_levels(levels, params)
    out = []
    for i, f in enumerate(levels, 1):
        x = conv2d(f, params[f"embed{i}.conv.weight"], params[f"embed{i}.conv.bias"])
        out.append(linear(global_avg_pool(x), params[f"embed{i}.fc.weight"], params[f"embed{i}.fc.bias"]))
    return out


def mrae_weights_from_embeddings(embeddings: Sequence[Tensor], template: int) -> AttentionWeights:
    """Softmax over {D^t = 1, D^i = cos(v^t, v^i)}; cosines are averaged over the batch."""
    if template not in (1, 2, 3):
        raise ValueError(f"template must be 1, 2 or 3, got {template}")
    embeddings = [as_tensor(e) for e in embeddings]
    if embeddings[0].ndim == 1:
        embeddings = [e.reshape(1, -1) for e in embeddings]
    t = template - 1
    n = embeddings[0].shape[0]
    logits = []
    for i, e in enumerate(embeddings):
        if i == t:
            logits.append(Tensor(1.0, dtype=e.dtype))
            continue
        per_image = [cosine_similarity(embeddings[t][b], e[b]) for b in range(n)]
        logits.append(per_image[0] if n == 1 else mean(stack(per_image)))
    logits = stack(logits)
    return AttentionWeights(softmax(logits), logits)


def mrae_weights(levels: FeatureLevels, params: FusionParams) -> AttentionWeights:
    return mrae_weights_from_embeddings(mrae_embeddings(levels, params), params.template)


def align_and_upsample(levels: FeatureLevels, params: FusionParams, apply_g: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Lift levels 1-2 to c3 channels with 1x1 convs, then upsample 2 and 3 to level-1 size."""
    _check_levels(levels, params)
    f1, f2, f3 = levels
    if apply_g:
        f1 = conv2d(f1, params["align1.weight"], params["align1.bias"])
        f2 = conv2d(f2, params["align2.weight"], params["align2.bias"])
    elif len(set(params.channels)) != 1:
        raise ShapeError(f"cannot sum levels with channels {params.channels} without alignment")
    mode = params.upsample_mode
    out = (f1, upsample(f2, 2, mode), upsample(f3, 4, mode))
    if not (out[0].shape == out[1].shape == out[2].shape):
        raise ShapeError(f"aligned shapes disagree: {[o.shape for o in out]}")
    return out


WeightsLike = Union[AttentionWeights, Tensor, Sequence[float]]


def _weight_vector(weights: WeightsLike) -> Tensor:
    if isinstance(weights, AttentionWeights):
        return weights.weights
    w = as_tensor(weights)
    if w.shape != (3,):
        raise ShapeError(f"expected three weights, got shape {w.shape}")
    return w


def fuse_aligned(aligned: Sequence[Tensor], weights: WeightsLike) -> Tensor:
    w = _weight_vector(weights)
    out = w[0] * aligned[0]
    for i in (1, 2):
        out = out + w[i] * aligned[i]
    return out


def fuse(levels: FeatureLevels, weights: WeightsLike, params: FusionParams) -> Tensor:
    """Attention map ``A = sum_i a_i g(F_i)`` at level-1 resolution with c3 channels."""
    return fuse_aligned(align_and_upsample(levels, params), weights)


def hard_attention(levels: FeatureLevels, i: int, params: FusionParams) -> Tensor:
    return fuse(levels, one_hot(i, levels.f1.dtype), params)

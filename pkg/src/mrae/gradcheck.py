"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, add, mean, mul, relu, square, stack, sub, tsum


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    n_coords: int

    def passed(self, tol: float) -> bool:
        return self.rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``|a - n| / max(|a|, |n|)`` in the 2-norm, floored to avoid 0/0."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    names: Optional[Sequence[str]] = None,
) -> list[GradCheckResult]:
    """Compare ``backward`` gradients of scalar ``fn()`` against central differences.

    ``inputs`` are perturbed in place and restored.  With ``max_coords`` only a
    random subset of coordinates per input is probed.
    """
    if eps <= 0:
        raise ValueError(f"finite-difference step must be positive, got {eps}")
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = rng or np.random.default_rng(0)
    results = []
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * eps)
        name = names[k] if names else getattr(t, "name", f"input{k}")
        results.append(GradCheckResult(name, relative_error(analytic[k].reshape(-1)[idx], numeric), idx.size))
    return results


# -- suite over every differentiable op and both learned fusion paths ---------


def _projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    # fixed random projection turns any output into a scalar loss
    r = Tensor(rng.standard_normal(out.shape))
    return lambda o: tsum(mul(o, r))


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    def t(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    return {
        "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1), [t(2, 3, 6, 6), t(4, 3, 3, 3), t(4)]),
        "max_pool2d": (lambda x: ops.max_pool2d(x, 3, 2, padding=1), [t(1, 2, 6, 6)]),
        "global_max_pool": (ops.global_max_pool, [t(2, 3, 4, 4)]),
        "global_avg_pool": (ops.global_avg_pool, [t(2, 3, 4, 4)]),
        "linear": (ops.linear, [t(3, 5), t(4, 5), t(4)]),
        "upsample_nearest": (lambda x: ops.upsample(x, 2, "nearest"), [t(1, 2, 3, 3)]),
        "upsample_bilinear_x2": (lambda x: ops.upsample(x, 2, "bilinear"), [t(1, 2, 3, 3)]),
        "upsample_bilinear_x4": (lambda x: ops.upsample(x, 4, "bilinear"), [t(1, 2, 3, 2)]),
        "softmax": (ops.softmax, [t(5)]),
        "cosine_similarity": (ops.cosine_similarity, [t(6), t(6)]),
        "relu": (relu, [t(3, 4)]),
        "square": (square, [t(3, 4)]),
        "mul": (mul, [t(3, 4), t(3, 4)]),
        "mul_scalar": (mul, [t(), t(3, 4)]),
        "add": (add, [t(3, 4), t(3, 4)]),
        "sub": (sub, [t(3, 4), t(3, 4)]),
        "mean_axis0": (lambda x: mean(x, 0), [t(3, 4)]),
        "getitem": (lambda x: x[1], [t(3, 4)]),
        "stack": (lambda a, b: stack([a, b]), [t(3), t(3)]),
        "reshape": (lambda x: x.reshape(4, 3), [t(3, 4)]),
    }


def _fusion_case(kind: str, seed: int):
    from .backbone import BackboneConfig
    from .train import AttentionDetector, TrainConfig

    cfg = TrainConfig(
        fusion=kind,
        steps=0,
        seed=seed,
        backbone=BackboneConfig(channels=(2, 3, 4), stem_channels=2),
        n_classes=2,
        d_embed=4,
    )
    model = AttentionDetector(cfg)
    rng = np.random.default_rng([seed, 7])
    # zero biases over dead units put pre-activations exactly on the relu kink
    for p in model.parameters():
        if p.name.endswith("bias"):
            p.data += 0.1 * rng.standard_normal(p.shape)
    image = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
    r = Tensor(rng.standard_normal((1, 2, 4, 4)))

    def loss():
        heat, _ = model(image)
        return tsum(mul(heat, r))

    return loss, model.parameters()


def gradcheck_suite(seeds: Sequence[int] = (0, 1, 2, 3, 4), eps: float = 1e-5, fusion_coords: Optional[int] = None) -> list[dict]:
    """Rows ``{case, seed, rel_error}``; one row per op (worst input) and fusion path per seed.

    ``fusion_coords`` limits the probed coordinates per parameter tensor of the
    fusion models (``None`` probes every coordinate).
    """
    if eps <= 0:
        raise ValueError(f"finite-difference step must be positive, got {eps}")
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (fn, inputs) in _op_cases(rng).items():
            project = _projected(fn(*inputs), rng)
            res = check_gradients(lambda: project(fn(*inputs)), inputs, eps=eps)
            rows.append({"case": name, "seed": seed, "rel_error": max(r.rel_error for r in res)})
        for kind in ("soft", "mrae"):
            loss, params = _fusion_case(kind, seed)
            res = check_gradients(loss, params, eps=eps, max_coords=fusion_coords, rng=np.random.default_rng(seed))
            rows.append({"case": f"{kind}_fusion_end_to_end", "seed": seed, "rel_error": max(r.rel_error for r in res)})
    return rows

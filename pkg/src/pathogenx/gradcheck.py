"""Finite-difference verification of every registered op and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from .model import ModelConfig, PathoGenXParams, forward_train, forward_train_batch
from .nn import mlp_forward
from .tensor import OPS, Tensor, apply, finite_difference_check

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        # NaN errors must fail, hence the explicit comparison.
        return bool(self.error < self.tolerance)


def _away_from_zero(rng, shape, low=0.3, high=1.5) -> np.ndarray:
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One scalar probe per registered op, with inputs chosen away from kinks.

    Each op output is contracted with fixed random weights so every output
    coordinate contributes to the checked gradient.
    """
    normal = rng.normal
    positive = lambda shape: rng.uniform(0.5, 2.0, size=shape)  # noqa: E731
    specs = {
        "add": ([normal(size=(3, 4)), normal(size=(4,))], {}),
        "sub": ([normal(size=(3, 4)), normal(size=(3, 1))], {}),
        "mul": ([normal(size=(3, 4)), normal(size=(4,))], {}),
        "div": ([normal(size=(3, 4)), _away_from_zero(rng, (3, 4))], {}),
        "matmul": ([normal(size=(3, 4)), normal(size=(4, 2))], {}),
        "exp": ([normal(size=(3, 4))], {}),
        "log": ([positive((3, 4))], {}),
        "sqrt": ([positive((3, 4))], {}),
        "neg": ([normal(size=(3, 4))], {}),
        "relu": ([_away_from_zero(rng, (3, 4))], {}),
        "sum": ([normal(size=(3, 4))], {"axis": 1, "keepdims": False}),
        "mean": ([normal(size=(3, 4))], {"axis": 0, "keepdims": True}),
        "max": ([normal(size=(3, 4))], {"axis": 1, "keepdims": False}),
        "softmax": ([normal(size=(3, 4))], {"axis": 1}),
        "transpose": ([normal(size=(3, 4))], {}),
        "reshape": ([normal(size=(3, 4))], {"shape": (2, 6)}),
        "concat": ([normal(size=(3, 4)), normal(size=(2, 4))], {"axis": 0}),
        "slice_rows": ([normal(size=(3, 4))], {"start": 1, "stop": 3}),
        "slice_cols": ([normal(size=(3, 4))], {"start": 0, "stop": 2}),
        "pad_rows": ([normal(size=(3, 4))], {"total": 7}),
        "depthwise_conv2d": ([normal(size=(4, 4, 2)), normal(size=(3, 3, 2))], {}),
        "layer_norm": ([normal(size=(3, 4)), normal(size=(4,)), normal(size=(4,))], {"eps": 1e-5}),
        "attention": ([normal(size=(2, 4)), normal(size=(3, 4)), normal(size=(3, 4))], {"heads": 2}),
    }
    cases = {}
    for name, (inputs, attrs) in specs.items():
        weights = Tensor(normal(size=OPS[name].forward(*inputs, **attrs)[0].shape))
        cases[name] = (lambda *ts, _n=name, _a=attrs, _w=weights: (apply(_n, *ts, **_a) * _w).sum(), inputs)
    return cases


def check_ops(seed: int = 0, tolerance: float = TOLERANCE) -> list[CheckResult]:
    """Worst relative error for every entry of ``OPS``, in registry order."""
    cases = _op_cases(np.random.default_rng(seed))
    missing = sorted(set(OPS) - set(cases))
    if missing:
        raise KeyError(f"no gradient probe for registered ops: {missing}")
    results = []
    for name in OPS:
        f, inputs = cases[name]
        try:
            err = finite_difference_check(f, inputs, step=STEP)
        except Exception:  # a broken backward rule may raise instead of being wrong
            err = float("inf")
        results.append(CheckResult(name, err, tolerance))
    return results


def check_parameters(
    loss: Callable[[], Tensor],
    params: list[tuple[str, Tensor]],
    step: float = STEP,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Central differences over the coordinates of every parameter tensor.

    With ``max_coords`` each tensor contributes at most that many coordinates,
    drawn from ``rng``; otherwise every coordinate is checked.
    """
    root = loss()
    root.backward()
    analytic = {name: t.grad.copy() for name, t in params}
    worst = 0.0
    for name, t in params:
        flat = t.data.reshape(-1)
        g = analytic[name].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = loss().item()
            flat[i] = orig - step
            lo = loss().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            err = abs(g[i] - numeric) / max(abs(g[i]), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


def toy_model(seed: int = 0, dim: int = 8, d_in: int = 5, d_genomic: int = 6) -> PathoGenXParams:
    rng = np.random.default_rng(seed)
    params = PathoGenXParams.init(ModelConfig(d_in=d_in, d_genomic=d_genomic, dim=dim, heads=2, hidden=4), rng)
    # Nonzero biases and PPEG kernels large enough to matter.
    for name, t in params.named_parameters():
        if name.endswith("bias") or name.endswith("offset"):
            t.data[...] = rng.normal(0.0, 0.1, size=t.shape)
        if name.startswith("ppeg"):
            t.data[...] = rng.normal(0.0, 0.3, size=t.shape)
    return params


def check_model(seed: int = 0, tolerance: float = TOLERANCE) -> list[CheckResult]:
    """The composed forward (3-patch toy bag, D=8), exhaustively, and the batch training loss."""
    rng = np.random.default_rng(seed)
    params = toy_model(seed)
    named = params.named_parameters()
    bag = rng.normal(size=(3, 5))
    g0 = np.abs(rng.normal(size=6))
    weights = [rng.normal(size=8) for _ in range(3)]

    def forward_scalar():
        art = forward_train(params, Tensor(bag), Tensor(g0))
        carriers = (art.P_l_cls, art.G_l, art.G_l_hat)
        total = art.risk
        for t, w in zip(carriers, weights):
            total = total + (t * Tensor(w)).sum()
        return total

    bags = [rng.normal(size=(n, 5)) for n in (3, 2, 4)]
    genomics = [np.abs(rng.normal(size=6)) for _ in bags]
    times, events = np.array([3.0, 1.0, 3.0]), np.array([1, 1, 0])
    w = L.LossWeights(0.5, 0.01, 0.7)

    def loss_scalar():
        art = forward_train_batch(params, bags, genomics)
        # Attached target and the genomic Cox term: every gradient path of the objective.
        genomic_risk = mlp_forward(params.risk_head, art.G_l).reshape(len(bags))
        cox = L.cox_loss(art.risk, times, events) + L.cox_loss(genomic_risk, times, events)
        latent = L.latent_loss(art.P_l_cls, art.G_l, w).mean()
        translation = L.translation_loss(art.G_l, art.G_l_hat, w).mean()
        return L.total_loss(cox, latent, translation, w).total

    return [
        CheckResult("model:forward_train", check_parameters(forward_scalar, named), tolerance),
        # The batch loss reuses the same blocks, so a seeded sample per tensor suffices.
        CheckResult("model:training_loss", check_parameters(loss_scalar, named, max_coords=24, rng=rng), tolerance),
    ]


def run_all(seed: int = 0, tolerance: float = TOLERANCE) -> list[CheckResult]:
    return check_ops(seed, tolerance) + check_model(seed, tolerance)

"""Finite-difference verification of the analytic adapter gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .linalg import make_rng
from .lora import LoraAdapter, LoraConfig, LoraPair
from .model import Backbone, ModelConfig, TrainBatch, backbone_shapes, forward, linear_shapes, loss, loss_and_grads

DEFAULT_TOLERANCE = 1e-4
FD_EPS = 1e-4
REL_FLOOR = 1e-6

GradFn = Callable[[Backbone, LoraAdapter, TrainBatch], LoraAdapter]


def _analytic(backbone: Backbone, adapter: LoraAdapter, batch: TrainBatch) -> LoraAdapter:
    return loss_and_grads(backbone, adapter, batch)[2]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)


def numeric_adapter_grads(backbone: Backbone, adapter: LoraAdapter, batch: TrainBatch,
                          eps: float = FD_EPS) -> LoraAdapter:
    """Central differences of the mean loss with respect to every adapter entry."""
    work = adapter.copy()

    def f():
        logits, _ = forward(backbone, work, batch)
        return loss(logits, batch.targets)

    pairs = {}
    for name, pair in work.pairs.items():
        grads = []
        for mat in pair:
            g = np.zeros_like(mat)
            for idx in np.ndindex(mat.shape):
                old = mat[idx]
                mat[idx] = old + eps
                hi = f()
                mat[idx] = old - eps
                lo = f()
                mat[idx] = old
                g[idx] = (hi - lo) / (2 * eps)
            grads.append(g)
        pairs[name] = LoraPair(*grads)
    return LoraAdapter(adapter.config, pairs)


def random_case(rng: np.random.Generator, max_dim: int = 16):
    """A small random model, a dense random adapter and a batch.

    Weights are drawn at unit-ish scale (not the tiny training init) and both
    adapter factors are non-zero so every gradient path is exercised.
    """
    n_heads = int(rng.choice([1, 2]))
    # dim >= 4: layer norm over two features is close to a sign function and
    # central differences at the default step stop resolving its curvature.
    dim = n_heads * int(rng.integers(4 // n_heads, max_dim // n_heads + 1))
    config = ModelConfig(vocab_size=int(rng.integers(5, 13)), dim=dim, n_layers=int(rng.integers(1, 3)),
                         n_heads=n_heads, context_len=int(rng.integers(3, 9)), mlp_ratio=int(rng.integers(1, 3)))
    weights = {}
    for name, shape in backbone_shapes(config).items():
        if name.endswith(".g"):
            weights[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        elif len(shape) == 1:
            weights[name] = 0.1 * rng.standard_normal(shape)
        else:
            weights[name] = rng.standard_normal(shape) / np.sqrt(shape[-1])
    backbone = Backbone(config, weights)
    shapes = linear_shapes(config)
    eligible = sorted(n for n, s in shapes.items() if min(s) > 1)
    n_targets = int(rng.integers(1, min(4, len(eligible)) + 1))
    targets = tuple(sorted(str(t) for t in rng.choice(eligible, size=n_targets, replace=False)))
    max_rank = min(min(shapes[t]) for t in targets) - 1
    lora = LoraConfig(rank=int(rng.integers(1, min(max_rank, 4) + 1)), scaling=float(rng.uniform(0.5, 4.0)),
                      target_layers=targets)
    pairs = {t: LoraPair(0.3 * rng.standard_normal((lora.rank, shapes[t][1])),
                         0.3 * rng.standard_normal((shapes[t][0], lora.rank))) for t in targets}
    B = int(rng.integers(1, 4))
    T = int(rng.integers(2, config.context_len + 1))
    inputs = rng.integers(0, config.vocab_size, size=(B, T))
    targets_ids = rng.integers(0, config.vocab_size, size=(B, T))
    targets_ids[0, -1] = -1  # exercise ignored positions
    return backbone, LoraAdapter(lora, pairs), TrainBatch(inputs, targets_ids)


@dataclass
class CaseResult:
    config: dict
    per_layer: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.per_layer.values())


@dataclass
class GradcheckReport:
    tolerance: float
    cases: list[CaseResult] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((c.max_error for c in self.cases), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.cases) and self.max_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "status": "PASS" if self.passed else "FAIL",
            "tolerance": self.tolerance,
            "max_relative_error": self.max_error,
            "cases": [{"config": c.config, "max_relative_error": c.max_error, "per_layer": c.per_layer}
                      for c in self.cases],
        }


def check_case(backbone: Backbone, adapter: LoraAdapter, batch: TrainBatch,
               grad_fn: GradFn = _analytic) -> dict[str, float]:
    """Per-layer maximum relative error between ``grad_fn`` and central differences."""
    analytic = grad_fn(backbone, adapter, batch)
    numeric = numeric_adapter_grads(backbone, adapter, batch)
    out = {}
    for name in sorted(adapter.pairs):
        errs = [relative_error(a, n).max() for a, n in zip(analytic.pairs[name], numeric.pairs[name])]
        out[name] = float(max(errs))
    return out


def run_gradcheck(n_cases: int = 20, seed: int = 0, tolerance: float = DEFAULT_TOLERANCE,
                  max_dim: int = 16, grad_fn: GradFn = _analytic) -> GradcheckReport:
    report = GradcheckReport(tolerance)
    for i in range(n_cases):
        backbone, adapter, batch = random_case(make_rng(seed, 11, i), max_dim)
        c = backbone.config
        meta = {"vocab_size": c.vocab_size, "dim": c.dim, "n_layers": c.n_layers, "n_heads": c.n_heads,
                "context_len": c.context_len, "mlp_ratio": c.mlp_ratio, "rank": adapter.config.rank,
                "targets": list(adapter.config.target_layers), "batch": list(batch.inputs.shape)}
        report.cases.append(CaseResult(meta, check_case(backbone, adapter, batch, grad_fn)))
    return report

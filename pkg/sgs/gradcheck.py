"""
SGS Gradcheck - finite-difference verification of every analytic backward.

Each case draws random float64 inputs and a random output weighting R, forms the
scalar f = sum(R * op(inputs)) and compares the analytic directional derivative
<grad f, d> against the central difference (f(x + h d) - f(x - h d)) / 2h for a
random direction d.  A primitive passes when the worst relative error over its
cases stays within the tolerance.

Usage:
    report = run_gradcheck(cases=100, seed=0)
    if not report.passed:
        for r in report.failures: print(r.name, r.max_rel_error)
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from sgs import autodiff as ad
from sgs.autodiff import Tensor
from sgs.core import GridSpec
from sgs.errors import ConfigurationError
from sgs.neural import project_views
from sgs.projection import Camera, bundle_for

log = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-6

Case = tuple[Callable[..., Tensor], list[np.ndarray]]


@dataclass
class PrimitiveResult:
    name: str
    cases: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


@dataclass
class GradcheckReport:
    results: list[PrimitiveResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[PrimitiveResult]:
        return [r for r in self.results if not r.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "primitives": [
                {"name": r.name, "cases": r.cases, "max_rel_error": r.max_rel_error, "passed": r.passed}
                for r in self.results
            ],
        }


# ---------------------------------------------------------------------------
# Case builders: rng -> (fn over tensors, input arrays)
# ---------------------------------------------------------------------------

def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _spectral_case(rng) -> Case:
    w = rng.normal(size=(4, 3, 2))
    u, v, _ = ad.power_iteration(w.reshape(4, -1), rng.normal(size=4), 3)
    return (lambda t: ad.spectral_normalize(t, u, v)), [w]


def _conv_case(nd: int) -> Callable:
    def build(rng) -> Case:
        x = rng.normal(size=(2, 3) + (4,) * nd)
        w = rng.normal(size=(2, 3) + (4,) * nd)
        b = rng.normal(size=2)
        return ad.conv, [x, w, b]
    return build


def _conv_transpose_case(rng) -> Case:
    x = rng.normal(size=(2, 3, 2, 2, 1))
    w = rng.normal(size=(3, 2, 4, 4, 4))
    b = rng.normal(size=2)
    return ad.conv_transpose, [x, w, b]


def _projection_case(semantic_mode: str) -> Callable:
    """DRC rendering of a softmax-parameterized volume from a random in-grid camera."""
    def build(rng) -> Case:
        grid = GridSpec(4, 4, 2, 0.5)
        lo = grid.origin + 0.1
        hi = grid.origin + np.array(grid.extent) - 0.1
        eye = rng.uniform(lo, hi)
        target = rng.uniform(lo, hi)
        while np.linalg.norm((target - eye)[:2]) < 0.5:
            target = rng.uniform(lo, hi)
        rotation = Camera.look_at(eye, target)
        camera = Camera.from_fov(5, 4, 90.0, rotation, eye, grid.diagonal)
        bundles = [[bundle_for(grid, camera)]]
        logits = rng.normal(size=(1, 3) + grid.shape)
        return (lambda t: project_views(ad.softmax(t, axis=1), bundles, semantic_mode)), [logits]
    return build


PRIMITIVES: dict[str, Callable[[np.random.Generator], Case]] = {
    "neg": lambda rng: ((lambda a: -a), [rng.normal(size=(3, 4))]),
    "add": lambda rng: ((lambda a, b: a + b), [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
    "sub": lambda rng: ((lambda a, b: a - b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))]),
    "mul": lambda rng: ((lambda a, b: a * b), [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))]),
    "div": lambda rng: ((lambda a, b: a / b), [rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4))]),
    "exp": lambda rng: (ad.exp, [rng.normal(size=(3, 4))]),
    "log": lambda rng: (ad.log, [rng.uniform(0.5, 2.0, size=(3, 4))]),
    "softplus": lambda rng: (ad.softplus, [rng.normal(size=(3, 4)) * 3]),
    "sigmoid": lambda rng: (ad.sigmoid, [rng.normal(size=(3, 4)) * 3]),
    "leaky_relu": lambda rng: (ad.leaky_relu, [_away_from_zero(rng, (3, 4))]),
    "softmax": lambda rng: ((lambda a: ad.softmax(a, axis=1)), [rng.normal(size=(2, 5, 3))]),
    "sum": lambda rng: ((lambda a: a.sum(axis=1, keepdims=True)), [rng.normal(size=(3, 4, 2))]),
    "reshape": lambda rng: ((lambda a: a.reshape(4, 6)), [rng.normal(size=(2, 3, 4))]),
    "transpose": lambda rng: ((lambda a: a.transpose(2, 0, 1)), [rng.normal(size=(2, 3, 4))]),
    "slice": lambda rng: ((lambda a: a[:, 1:3]), [rng.normal(size=(3, 4))]),
    "concat": lambda rng: ((lambda a, b: ad.concat([a, b], axis=1)), [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))]),
    "matmul": lambda rng: ((lambda a, b: a @ b), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
    "instance_norm": lambda rng: (ad.instance_norm, [rng.normal(size=(2, 3, 4, 4))]),
    "spectral_normalize": _spectral_case,
    "conv2d": _conv_case(2),
    "conv3d": _conv_case(3),
    "conv_transpose3d": _conv_transpose_case,
    "projection": _projection_case("normalized"),
    "projection_raw": _projection_case("raw"),
}


# ---------------------------------------------------------------------------
# Checking
# ---------------------------------------------------------------------------

def relative_error(numeric: float, analytic: float) -> float:
    return abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)


def check_case(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator, h: float = STEP) -> float:
    """Relative error of one directional-derivative comparison."""
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    weights = rng.normal(size=out.shape)
    (out * weights).sum().backward()
    directions = [rng.normal(size=x.shape) for x in inputs]
    analytic = sum(float(np.sum((leaf.grad if leaf.grad is not None else 0.0) * d))
                   for leaf, d in zip(leaves, directions))

    def value(sign: float) -> float:
        with ad.no_grad():
            shifted = [Tensor(x + sign * h * d) for x, d in zip(inputs, directions)]
            return float(np.sum(fn(*shifted).data * weights))

    numeric = (value(1.0) - value(-1.0)) / (2 * h)
    return relative_error(numeric, analytic)


def check_primitive(name: str, cases: int, rng: np.random.Generator, tolerance: float = TOLERANCE) -> PrimitiveResult:
    build = PRIMITIVES[name]
    worst = 0.0
    for _ in range(cases):
        fn, inputs = build(rng)
        worst = max(worst, check_case(fn, inputs, rng))
    return PrimitiveResult(name, cases, worst, tolerance)


def run_gradcheck(
    cases: int = 100,
    seed: int = 0,
    names: list[str] | None = None,
    tolerance: float = TOLERANCE,
) -> GradcheckReport:
    """Check every registered primitive (or `names`) on `cases` seeded random instances each."""
    unknown = sorted(set(names or ()) - set(PRIMITIVES))
    if unknown:
        raise ConfigurationError(f"Unknown primitives: {', '.join(unknown)}")
    report = GradcheckReport()
    for name in names or list(PRIMITIVES):
        rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
        result = check_primitive(name, cases, rng, tolerance)
        log.debug("gradcheck: %s max rel error %.3e", name, result.max_rel_error)
        report.results.append(result)
    return report

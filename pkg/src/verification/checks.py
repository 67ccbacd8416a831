"""Invariant families run by the ``verify`` command.

Each check takes the implementation under test as keyword arguments so a test
can hand it a deliberately broken function and watch the family fail.
"""
import logging
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from src.evaluation.ablation import DEFAULT_LADDER
from src.evaluation.metrics import mae as mae_impl
from src.labels.granularity import (
    AGE_MAX,
    AGE_MIN,
    CANONICAL_WIDTHS,
    canonical_specs,
    coarsen as coarsen_impl,
    quantize as quantize_impl,
)
from src.losses.multi_loss import (
    REGRESSION,
    BranchOutputs,
    LossConfig,
    aggregate_loss as aggregate_impl,
    cross_entropy,
    loss_gradients as gradients_impl,
    mse,
)
from src.data.synthetic import synth_ages
from src.training.scheduler import plateau_lr as plateau_impl
from src.training.trainer import EpochRecord, TrainConfig

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
GRAD_RTOL = 1e-4


@dataclass
class CheckResult:
    """Outcome of one invariant family."""

    family: str
    passed: bool
    detail: str
    seconds: float = 0.0


def check_quantize(quantize: Callable = quantize_impl) -> CheckResult:
    """Every integer age and canonical width against interval enumeration."""
    specs = canonical_specs()
    for width, spec in specs.items():
        for k in range(spec.num_classes):
            lo = AGE_MIN + k * width
            for age in range(lo, lo + width):
                got = quantize(age, spec)
                if got != k:
                    return CheckResult("quantize", False, f"age {age} width {width}: got {got}, expected {k}")
    worked = tuple(quantize(44, specs[w]) for w in CANONICAL_WIDTHS)
    if worked != (43, 8, 4, 2):
        return CheckResult("quantize", False, f"age 44 maps to {worked}, expected (43, 8, 4, 2)")
    return CheckResult("quantize", True, f"{AGE_MAX - AGE_MIN + 1} ages x {len(specs)} widths")


def check_hierarchy(quantize: Callable = quantize_impl, coarsen: Callable = coarsen_impl) -> CheckResult:
    """coarsen(quantize(a, fine)) == quantize(a, coarse) for all nested pairs."""
    specs = canonical_specs()
    pairs = [(f, c) for f in CANONICAL_WIDTHS for c in CANONICAL_WIDTHS if c % f == 0]
    for fine_w, coarse_w in pairs:
        fine, coarse = specs[fine_w], specs[coarse_w]
        for age in range(AGE_MIN, AGE_MAX + 1):
            lhs = coarsen(quantize(age, fine), fine, coarse)
            rhs = quantize(age, coarse)
            if lhs != rhs:
                return CheckResult(
                    "hierarchy", False, f"age {age} {fine_w}->{coarse_w}: coarsen gives {lhs}, direct {rhs}"
                )
    return CheckResult("hierarchy", True, f"{len(pairs)} nested pairs")


def random_outputs(rng: np.random.Generator, age: float, regression_spread: float = 2.0) -> BranchOutputs:
    """Gaussian logits for every canonical branch and a nearby regression output."""
    specs = canonical_specs()
    logits = {w: rng.normal(0.0, 1.0, size=specs[w].num_classes) for w in CANONICAL_WIDTHS}
    return BranchOutputs(logits, float(age + rng.normal(0.0, regression_spread)))


def _relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def check_gradient(
    aggregate_loss: Callable = aggregate_impl,
    loss_gradients: Callable = gradients_impl,
    instances: int = 100,
    seed: int = 0,
) -> CheckResult:
    """Closed-form gradients against central finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        age = float(rng.uniform(AGE_MIN, AGE_MAX))
        config = LossConfig(CANONICAL_WIDTHS, True, float(rng.uniform(0.25, 4.0)))
        outputs = random_outputs(rng, age)
        grads = loss_gradients(outputs, age, config)

        def total(out: BranchOutputs) -> float:
            return aggregate_loss(out, age, config).aggregate

        for width in CANONICAL_WIDTHS:
            base = outputs.class_logits[width]
            for j in range(base.size):
                plus, minus = base.copy(), base.copy()
                plus[j] += FD_STEP
                minus[j] -= FD_STEP
                f_plus = total(BranchOutputs({**outputs.class_logits, width: plus}, outputs.regression_output))
                f_minus = total(BranchOutputs({**outputs.class_logits, width: minus}, outputs.regression_output))
                numeric = (f_plus - f_minus) / (2 * FD_STEP)
                worst = max(worst, _relative_error(numeric, grads.class_logits[width][j]))
        y = outputs.regression_output
        f_plus = total(BranchOutputs(outputs.class_logits, y + FD_STEP))
        f_minus = total(BranchOutputs(outputs.class_logits, y - FD_STEP))
        numeric = (f_plus - f_minus) / (2 * FD_STEP)
        worst = max(worst, _relative_error(numeric, grads.regression_output))
    passed = worst <= GRAD_RTOL
    return CheckResult("gradient", passed, f"max relative error {worst:.2e} over {instances} instances")


def check_composition(aggregate_loss: Callable = aggregate_impl, cases: int = 1000, seed: int = 1) -> CheckResult:
    """Aggregate equals the plain sum of independent terms; masks zero inactive terms."""
    rng = np.random.default_rng(seed)
    specs = canonical_specs()
    full = LossConfig(CANONICAL_WIDTHS, True, 1.0)
    for case in range(cases):
        age = float(rng.uniform(AGE_MIN, AGE_MAX))
        outputs = random_outputs(rng, age)
        expected = 0.0
        for width in CANONICAL_WIDTHS:
            expected += cross_entropy(outputs.class_logits[width], quantize_impl(age, specs[width]))
        expected += mse(outputs.regression_output, age)
        got = aggregate_loss(outputs, age, full).aggregate
        if abs(got - expected) > 8 * np.spacing(abs(expected)):
            return CheckResult("composition", False, f"case {case}: aggregate {got!r} vs sum {expected!r}")

    age = 44.0
    outputs = random_outputs(rng, age)
    for row in DEFAULT_LADDER:
        breakdown = aggregate_loss(outputs, age, row)
        active = set(row.active_granularities) | ({REGRESSION} if row.use_regression else set())
        if set(breakdown.per_branch) != active:
            return CheckResult(
                "composition", False, f"row {row.name}: terms {sorted(map(str, breakdown.per_branch))}"
            )
        manual = sum(v for k, v in breakdown.per_branch.items() if k != REGRESSION)
        if row.use_regression:
            manual += row.lam * breakdown.per_branch[REGRESSION]
        if abs(manual - breakdown.aggregate) > 8 * np.spacing(abs(manual)):
            return CheckResult("composition", False, f"row {row.name}: masked aggregate mismatch")
    return CheckResult("composition", True, f"{cases} random cases, {len(DEFAULT_LADDER)} ladder rows")


def _records(val_losses: Sequence[float]) -> List[EpochRecord]:
    return [EpochRecord(i + 1, 0.0, 0.0, v, {}, 0, "adam") for i, v in enumerate(val_losses)]


def check_scheduler(plateau_lr: Callable = plateau_impl) -> CheckResult:
    """The eight-epoch plateau example and a never-plateauing history."""
    config = TrainConfig()
    plateau = [1.0] + [1.0] * 8
    for epoch in range(1, 11):
        lr = plateau_lr(_records(plateau[: epoch - 1]), config)
        expected = 1e-3 if epoch <= 9 else 1e-4
        if not np.isclose(lr, expected, rtol=1e-12, atol=0.0):
            return CheckResult("scheduler", False, f"plateau history: epoch {epoch} lr {lr}, expected {expected}")
    decreasing = [1.0 / (k + 1) for k in range(20)]
    for epoch in range(1, 21):
        lr = plateau_lr(_records(decreasing[: epoch - 1]), config)
        if lr != config.initial_lr:
            return CheckResult("scheduler", False, f"decreasing history decayed at epoch {epoch}")
    return CheckResult("scheduler", True, "plateau and decreasing histories")


def check_mae(mae: Callable = mae_impl, seed: int = 2) -> CheckResult:
    """Brute-force oracle on random vectors and the constant-midpoint predictor."""
    rng = np.random.default_rng(seed)
    for trial in range(20):
        n = int(rng.integers(1, 2000))
        pred = rng.uniform(-50, 150, size=n)
        true = rng.uniform(1, 100, size=n)
        exact = float(sum(abs(Fraction(p) - Fraction(t)) for p, t in zip(pred, true)) / n)
        got = mae(pred, true)
        if abs(got - exact) > 4 * np.spacing(exact):
            return CheckResult("mae", False, f"trial {trial}: {got!r} vs exact {exact!r}")
    ages = synth_ages(10_000, seed)
    midpoint = mae(np.full(ages.size, 50.5), ages)
    if abs(midpoint - 25.0) > 1.0:
        return CheckResult("mae", False, f"constant-midpoint MAE {midpoint:.3f}, expected 25 +- 1")
    return CheckResult("mae", True, f"oracle ok; constant-midpoint MAE {midpoint:.3f}")


FAMILIES: Dict[str, Callable[[], CheckResult]] = {
    "quantize": check_quantize,
    "hierarchy": check_hierarchy,
    "gradient": check_gradient,
    "composition": check_composition,
    "scheduler": check_scheduler,
    "mae": check_mae,
}


def run_checks(families: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """
    Run the selected invariant families (all by default).

    Args:
        families: Family names from ``FAMILIES``

    Returns:
        One CheckResult per family, in the order requested
    """
    names = list(families) if families else list(FAMILIES)
    unknown = [n for n in names if n not in FAMILIES]
    if unknown:
        raise KeyError(f"unknown families {unknown}; choose from {list(FAMILIES)}")
    results = []
    for name in names:
        start = time.perf_counter()
        try:
            result = FAMILIES[name]()
        except Exception as e:
            result = CheckResult(name, False, f"raised {type(e).__name__}: {e}")
        result.seconds = time.perf_counter() - start
        logger.debug("%s: %s (%.2fs)", name, result.detail, result.seconds)
        results.append(result)
    return results

"""
(©) EDQ Lab

This plugin handles the `verify` command: the oracle, identity, gradient, thinning and
graph suite. Every check prints one PASS/FAIL line; any failure exits with status 3.
"""

import logging
import math
import platform
from dataclasses import dataclass

import numpy as np
import psutil
from scipy import stats

from database.database import read_json
from edq import identifiability, oracle
from edq.approximator import MlpQ, TargetCopy, check_gradient, decode_history_key
from edq.core_process import (
    ZERO, Component, ConstantIntensity, PiecewiseConstantIntensity, Policy, ProcessSpec, sample_trajectory
)
from edq.errors import VerificationFailure
from edq.estimators import train_edq_tabular
from helper_func import format_bytes, stream
from lab import EXIT_OK, Lab
from plugins import DEFAULT_FIXTURE, resolve_path

logger = logging.getLogger(__name__)

EXACT_TOLERANCE = 1e-9
GRADIENT_TOLERANCE = 1e-5
SOFT_UPDATE_TOLERANCE = 1e-12
KS_LEVEL = 0.01
GRAPH_TREATMENT = "presets/graph-treatment.json"
GRAPH_CONFOUNDED = "presets/graph-confounded.json"

CHECKS = []


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def check(name: str):
    """Registers a verification check; the function returns (passed, detail)."""
    def decorator(func):
        CHECKS.append((name, func))
        return func
    return decorator


def random_instances(seed: int, n: int = 100) -> list:
    """Random tables with horizons 1..4, two or three feature values and binary actions."""
    rng = stream(seed, "verify", "instances")
    return [
        oracle.random_process(rng, horizon=1 + i % 4, n_features=2 + (i // 4) % 2, n_actions=2)
        for i in range(n)
    ]


def poisson_spec(rate: float, horizon: float) -> ProcessSpec:
    return ProcessSpec(Component(ConstantIntensity(rate), name="feature"), Component(ZERO, name="outcome"),
                       Policy(ZERO), horizon)


def periodic_intensity(periods: int) -> PiecewiseConstantIntensity:
    """Rates 1, 3, 0.5 on [0, 3), [3, 6), [6, 10), repeated every 10 time units."""
    breakpoints = [10.0 * k + b for k in range(periods) for b in (0.0, 3.0, 6.0)] + [10.0 * periods]
    return PiecewiseConstantIntensity(breakpoints, [1.0, 3.0, 0.5] * periods)


def rescaled_gaps(intensity: PiecewiseConstantIntensity, times) -> np.ndarray:
    """∫λ between consecutive events, starting from time 0."""
    cumulative = np.array([intensity.integral(0.0, t) for t in times])
    return np.diff(np.concatenate([[0.0], cumulative]))


# ======================================================================================
#                                     *** Checks ***
# ======================================================================================

@check("discrete identity")
def check_discrete_identity(seed: int):
    rng = stream(seed, "verify", "prefixes")
    worst, count = 0.0, 0
    for proc in random_instances(seed):
        prefixes = [(), oracle.sample_history(proc, int(rng.integers(proc.horizon)), rng)]
        for prefix in prefixes:
            for d in range(1, proc.horizon - len(prefix) + 1):
                lhs, rhs = oracle.verify_discrete_identity(proc, prefix, d)
                worst = max(worst, abs(lhs - rhs))
                count += 1
    return worst < EXACT_TOLERANCE, f"max |lhs - rhs| = {worst:.2e} over {count} (instance, prefix, d) cases"


@check("fixed points equal enumeration")
def check_fixed_points(seed: int):
    worst_edq = worst_fqe = 0.0
    for proc in random_instances(seed):
        truth = oracle.target_values(proc)
        worst_edq = max(worst_edq, oracle.edq_fixed_point(proc).max_abs_diff(truth))
        worst_fqe = max(worst_fqe, oracle.fqe_fixed_point(proc).max_abs_diff(truth))
    passed = worst_edq < EXACT_TOLERANCE and worst_fqe < EXACT_TOLERANCE
    return passed, f"EDQ max gap {worst_edq:.2e}, FQE max gap {worst_fqe:.2e}"


@check("fixture values")
def check_fixture(seed: int):
    data = read_json(resolve_path(DEFAULT_FIXTURE))
    proc = oracle.DiscreteProcess.from_dict(data["process"])
    expected = data["expected"]
    gaps = [
        abs(oracle.enumerate_expectation(proc, (), oracle.Under.TARGET) - expected["target_root"]),
        abs(oracle.enumerate_expectation(proc, (), oracle.Under.OBSERVED) - expected["observed_root"]),
    ]
    fixed = oracle.edq_fixed_point(proc)
    gaps += [abs(fixed.value(decode_history_key(k)) - v) for k, v in expected["q"].items()]
    gaps += [
        abs(oracle.enumerate_expectation(proc, decode_history_key(k), oracle.Under.TARGET) - v)
        for k, v in expected["expectations"].items()
    ]
    return max(gaps) < EXACT_TOLERANCE, f"max gap {max(gaps):.2e} over {len(gaps)} frozen values"


@check("tabular EDQ sweep")
def check_tabular_sweep(seed: int):
    worst, residual = 0.0, math.inf
    for proc in random_instances(seed, n=20):
        result = train_edq_tabular(proc, (), proc.horizon + 1, exact=True)
        worst = max(worst, result.q.max_abs_diff(oracle.edq_fixed_point(proc)))
    proc = random_instances(seed, n=4)[3]
    perturbed = oracle.edq_fixed_point(proc)
    perturbed.set((), perturbed.value(()) + 0.1)
    residual, _ = oracle.self_consistency_residual(proc, perturbed)
    passed = worst < EXACT_TOLERANCE and residual > 0.05
    return passed, f"sweep max gap {worst:.2e}; perturbed root residual {residual:.3f}"


@check("gradient")
def check_gradients(seed: int):
    rng = stream(seed, "verify", "gradient")
    worst = 0.0
    for i in range(100):
        model = MlpQ(5, (8, 8), "tanh" if i % 2 == 0 else "softplus", rng=rng)
        x = rng.normal(size=(3, 5))
        y = rng.normal(size=3)
        worst = max(worst, check_gradient(model, x, y))
    return worst < GRADIENT_TOLERANCE, f"max relative error {worst:.2e} over 100 cases"


@check("soft update law")
def check_soft_update(seed: int):
    rng = stream(seed, "verify", "soft-update")
    worst = 0.0
    for tau, steps in ((0.01, 100), (0.1, 30), (1.0, 1)):
        source = MlpQ(4, (6,), rng=rng)
        copy = TargetCopy(MlpQ(4, (6,), rng=rng), tau)
        start = np.linalg.norm(copy.get_params() - source.get_params())
        for n in range(1, steps + 1):
            copy.update(source)
            actual = np.linalg.norm(copy.get_params() - source.get_params())
            expected = (1.0 - tau) ** n * start
            worst = max(worst, abs(actual - expected) / start)
    return worst < SOFT_UPDATE_TOLERANCE, f"max relative deviation {worst:.2e}"


@check("thinning counts")
def check_poisson(seed: int):
    rng = stream(seed, "verify", "poisson")
    spec = poisson_spec(2.0, 10.0)
    counts = np.array([len(sample_trajectory(spec, rng)) for _ in range(10_000)])
    band = 3.0 * math.sqrt(20.0) / math.sqrt(len(counts))
    return abs(counts.mean() - 20.0) < band, f"mean count {counts.mean():.3f}, allowed 20 ± {band:.3f}"


@check("thinning time rescaling")
def check_rescaling(seed: int):
    rng = stream(seed, "verify", "rescaling")
    intensity = periodic_intensity(715)
    spec = ProcessSpec(Component(intensity, name="feature"), Component(ZERO, name="outcome"), Policy(ZERO),
                       10.0 * 715)
    traj = sample_trajectory(spec, rng)
    gaps = rescaled_gaps(intensity, traj.times)
    p_value = stats.kstest(gaps, "expon").pvalue
    return p_value > KS_LEVEL, f"KS p-value {p_value:.3f} on {len(gaps)} rescaled gaps"


@check("eliminability")
def check_graphs(seed: int):
    treatment = identifiability.check_eliminability(
        identifiability.LocalIndependenceGraph.from_dict(read_json(resolve_path(GRAPH_TREATMENT))))
    confounded = identifiability.check_eliminability(
        identifiability.LocalIndependenceGraph.from_dict(read_json(resolve_path(GRAPH_CONFOUNDED))))
    witnesses = [w for c in confounded.checks for b in c.conditions for m in b.checks for w in m.witnesses]
    direct = all(len(w.vertices) == 2 for w in witnesses) and len(witnesses) >= 2
    passed = treatment.eliminable and not confounded.eliminable and direct
    return passed, f"treatment graph {treatment.eliminable}, confounded graph {confounded.eliminable}"


# ======================================================================================
#                                     *** Command ***
# ======================================================================================

def run_checks(seed: int = 0, only=None) -> list:
    results = []
    for name, func in CHECKS:
        if only and name not in only:
            continue
        try:
            passed, detail = func(seed)
        except Exception as e:  # a crashing check is a failed check
            logger.error(f"Check '{name}' raised: {e}", exc_info=True)
            passed, detail = False, f"raised {type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(passed), detail))
    return results


def host_summary() -> str:
    memory = psutil.virtual_memory()
    return (
        f"host {platform.node()} | {psutil.cpu_count(logical=False)} cores / "
        f"{psutil.cpu_count(logical=True)} threads | memory {format_bytes(memory.available)} free "
        f"of {format_bytes(memory.total)}"
    )


@Lab.on_command("verify", help="Run the oracle, identity, gradient, thinning and graph checks.")
def verify(lab: Lab, args) -> int:
    seed = args.seed if args.seed is not None else 0
    print(host_summary())
    results = run_checks(seed)
    for result in results:
        print(result.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailure(f"{len(failed)} of {len(results)} check(s) failed: {', '.join(failed)}")
    print(f"All {len(results)} checks passed.")
    return EXIT_OK

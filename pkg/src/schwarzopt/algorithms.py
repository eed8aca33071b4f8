"""Additive Schwarz drivers: plain steps, backtracking, and momentum.

One outer iteration solves every local problem at the current point,
combines the corrections with a step size tau, and (optionally) searches
for tau along the ladder tau0 * rho^e with integer e.  Working on the
exponent ladder instead of multiplying floats keeps repeated accept/reject
cycles from drifting: e <= 0 means tau >= tau0 exactly, which the
step-size-floor guarantee is stated against.

The backtracking acceptance rule compares the trial energy with

    (1 - tau*N) E(base) + tau * sum_k E(base + prolong(w_k)),

plus a relative slack of 1e-12 so the exact-arithmetic guarantee survives
roundoff.  Corrections that fail to lower the energy (possible only
through roundoff, since w = 0 is always admissible) are replaced by zero,
which keeps the right-hand side at or below E(base).

Momentum follows the FISTA recurrence with a gradient-style restart.  The
raw overrelaxed point u + beta*(u - u_prev) leaves the feasible set
whenever the iterates settle onto an active constraint, so the driver
clips it back through the model's domain projection; that keeps every
acceptance comparison finite and, by convexity, every combined step
feasible.  Should a base point escape dom G anyway, the comparison treats
the infinite right-hand side as an accept, and such a vacuous accept never
moves the warm start: an infinite bound holds for every step size and says
nothing about which one to try next.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import ProblemInstance, as_coefficients, eval_energy, inner_product
from .decomposition import Subspace
from .errors import BacktrackDiverged, ConfigError, DimensionError, SchwarzError

__all__ = [
    "SolverConfig",
    "IterationRecord",
    "Trace",
    "Correction",
    "BacktrackResult",
    "compute_local_corrections",
    "apply_step",
    "stop_criterion",
    "backtracking_search",
    "momentum_update",
    "restart_test",
    "run_plain",
    "run_backtracking",
    "run_momentum",
]


@dataclass
class SolverConfig:
    """Knobs shared by all three drivers.

    target_error is an absolute energy gap against reference_energy; when
    both are set, a driver stops as soon as E(u) - reference_energy falls
    to the target.  Otherwise it runs the full max_outer iterations.
    """

    tau0: float
    omega: float = 1.0
    rho: float = 0.5
    max_outer: int = 300
    max_backtrack_trials: int = 60
    energy_slack: float = 1e-12
    target_error: float | None = None
    reference_energy: float | None = None

    def __post_init__(self):
        if not 0.0 < self.tau0 <= 1.0:
            raise ConfigError(f"tau0 must lie in (0, 1], got {self.tau0}")
        if self.omega < 1.0:
            raise ConfigError(f"omega must be at least 1, got {self.omega}")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError(f"rho must lie in (0, 1), got {self.rho}")
        if self.max_outer < 1 or self.max_backtrack_trials < 1:
            raise ConfigError("iteration caps must be positive")
        if self.energy_slack < 0.0:
            raise ConfigError("energy slack must be nonnegative")
        if self.target_error is not None and self.target_error <= 0.0:
            raise ConfigError("target error must be positive when set")
        if self.reference_energy is not None and not math.isfinite(self.reference_energy):
            raise ConfigError("reference energy must be finite when set")


@dataclass
class IterationRecord:
    n: int
    energy: float
    tau: float
    backtrack_trials: int
    restarted: bool
    elapsed_ms: float
    t: float = 1.0
    beta: float = 0.0


@dataclass
class Trace:
    """Per-iteration records plus run metadata.

    `history` is populated only on request (momentum audits); it stores
    (v, u_prev, u_next) copies per iteration.
    """

    records: list[IterationRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    history: list | None = None

    @property
    def initial_energy(self) -> float:
        return self.meta["initial_energy"]

    def energies(self) -> np.ndarray:
        return np.array([r.energy for r in self.records])

    def taus(self) -> np.ndarray:
        return np.array([r.tau for r in self.records])

    def total_backtrack_trials(self) -> int:
        return sum(r.backtrack_trials for r in self.records)

    def restart_count(self) -> int:
        return sum(1 for r in self.records if r.restarted)


class Correction(NamedTuple):
    subspace: Subspace
    w: np.ndarray
    energy: float  # E(base + prolong(w))


class BacktrackResult(NamedTuple):
    u_next: np.ndarray
    tau: float
    trials: int
    ladder: list  # (tau, trial energy, accepted) per trial, for diagnostics
    vacuous: bool  # accepted against a non-finite right-hand side


def _worker_count(n_tasks: int) -> int:
    raw = os.environ.get("SCHWARZ_THREADS", "").strip()
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"SCHWARZ_THREADS must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ConfigError(f"SCHWARZ_THREADS must be at least 1, got {cap}")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def compute_local_corrections(
    problem: ProblemInstance,
    base: np.ndarray,
    omega: float,
    base_energy: float | None = None,
) -> list[Correction]:
    """Solve every local problem at `base` and evaluate the trial energies.

    Local solves run concurrently up to SCHWARZ_THREADS workers; the result
    order is always subspace order, so downstream reductions are
    deterministic.  A correction whose trial energy exceeds E(base) (a
    roundoff artifact; zero is always admissible) is replaced by zero.
    """
    model = problem.model
    subs = problem.decomposition.subspaces
    base = as_coefficients(base, model.n_dof)
    if base_energy is None:
        base_energy = eval_energy(model, base)

    def solve_one(k: int) -> tuple[np.ndarray, float]:
        w = np.asarray(model.local_solve(k, base, omega), dtype=np.float64)
        if w.shape != (subs[k].dim,):
            raise DimensionError(
                f"subspace {k} returned {w.shape} local values, expected ({subs[k].dim},)"
            )
        return w, eval_energy(model, base + subs[k].prolong(w))

    workers = _worker_count(len(subs))
    if workers == 1:
        results = [solve_one(k) for k in range(len(subs))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve_one, range(len(subs))))

    corrections = []
    for k, (w, energy) in enumerate(results):
        if energy > base_energy:
            w = np.zeros(subs[k].dim)
            energy = base_energy
        corrections.append(Correction(subs[k], w, energy))
    return corrections


def apply_step(base: np.ndarray, corrections: list[Correction], tau: float) -> np.ndarray:
    """base + tau * sum of prolonged corrections, summed in subspace order."""
    if tau <= 0.0:
        raise ConfigError(f"step size must be positive, got {tau}")
    total = np.zeros_like(base)
    for sub, w, _ in corrections:
        if sub.kind == "injection":
            total[sub.indices] += w
        else:
            total += sub.matrix @ w
    return base + tau * total


def stop_criterion(
    E_next: float,
    E_base: float,
    subspace_energies: list[float],
    tau: float,
    N: int,
    slack: float,
) -> bool:
    """Acceptance test for one backtracking trial.

    True iff E_next <= (1 - tau*N) E_base + tau * sum(E_k) + slack*(1+|E_base|).
    A non-finite right-hand side accepts: it means the base point (or a
    subspace trial point) was outside dom G, where the bound says nothing.
    """
    if len(subspace_energies) != N:
        raise DimensionError(f"expected {N} subspace energies, got {len(subspace_energies)}")
    total = sum(subspace_energies)
    if not (math.isfinite(E_base) and math.isfinite(total)):
        return True
    rhs = (1.0 - tau * N) * E_base + tau * total + slack * (1.0 + abs(E_base))
    return E_next <= rhs


def _ladder_exponent(tau_prev: float, tau0: float, rho: float) -> int:
    """Integer e with tau_prev ~= tau0 * rho^e (exact for ladder values).

    The logs are taken separately: the quotient tau_prev/tau0 can overflow
    for extreme warm starts even though both operands are fine.
    """
    return int(round((math.log(tau_prev) - math.log(tau0)) / math.log(rho)))


def backtracking_search(
    problem: ProblemInstance,
    base: np.ndarray,
    corrections: list[Correction],
    tau_prev: float,
    cfg: SolverConfig,
    base_energy: float | None = None,
) -> BacktrackResult:
    """One backtracking loop: first trial tau_prev/rho, then shrink by rho.

    Trial steps live on the ladder tau0 * rho^e, so a later trial at e = 0
    equals tau0 bit for bit.  Raises BacktrackDiverged with the full trial
    ladder when cfg.max_backtrack_trials trials all get rejected.

    The result is flagged vacuous when the acceptance bound was non-finite
    (base point or a subspace trial point outside dom G): the comparison
    then accepts any step size and says nothing about the energy, so
    callers must not warm-start the next search from it.
    """
    model = problem.model
    if not (math.isfinite(tau_prev) and tau_prev > 0.0):
        raise ConfigError(f"warm-start step must be positive and finite, got {tau_prev}")
    if base_energy is None:
        base_energy = eval_energy(model, base)
    energies = [c.energy for c in corrections]
    N = len(corrections)
    vacuous = not (math.isfinite(base_energy) and math.isfinite(sum(energies)))

    e = _ladder_exponent(tau_prev, cfg.tau0, cfg.rho) - 1
    ladder = []
    trials = 0
    while True:
        try:
            tau = cfg.tau0 * cfg.rho**e
        except OverflowError:
            tau = math.inf
        if not (math.isfinite(tau) and tau > 0.0):
            raise BacktrackDiverged(f"trial step size degenerated to {tau}", ladder)
        u_try = apply_step(base, corrections, tau)
        E_try = eval_energy(model, u_try)
        accepted = stop_criterion(E_try, base_energy, energies, tau, N, cfg.energy_slack)
        ladder.append((tau, E_try, accepted))
        trials += 1
        if accepted:
            return BacktrackResult(u_try, tau, trials, ladder, vacuous)
        if trials >= cfg.max_backtrack_trials:
            raise BacktrackDiverged(
                f"no step accepted within {trials} trials (last tau {tau:.3e})", ladder
            )
        e += 1


def momentum_update(t: float) -> tuple[float, float]:
    """FISTA recurrence: t+ = (1 + sqrt(1+4t^2))/2, beta = (t-1)/t+."""
    if t < 1.0:
        raise ConfigError(f"momentum parameter must be at least 1, got {t}")
    t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
    return t_next, (t - 1.0) / t_next


def restart_test(v: np.ndarray, u_next: np.ndarray, u_prev: np.ndarray) -> bool:
    """True when the overrelaxation opposes the step just taken (strict)."""
    return inner_product(v - u_next, u_next - u_prev) > 0.0


def _base_trace(problem: ProblemInstance, cfg: SolverConfig, algorithm: str) -> Trace:
    return Trace(
        meta={
            "problem": problem.label,
            "fingerprint": problem.fingerprint,
            "algorithm": algorithm,
            "tau0": cfg.tau0,
            "omega": cfg.omega,
            "rho": cfg.rho,
            "initial_energy": eval_energy(problem.model, problem.initial_iterate),
        }
    )


def _reached_target(cfg: SolverConfig, energy: float) -> bool:
    if cfg.target_error is None or cfg.reference_energy is None:
        return False
    return energy - cfg.reference_energy <= cfg.target_error


def run_plain(problem: ProblemInstance, cfg: SolverConfig, tau: float | None = None) -> Trace:
    """Constant-step additive Schwarz (tau defaults to tau0)."""
    if tau is None:
        tau = cfg.tau0
    if not 0.0 < tau <= cfg.tau0:
        raise ConfigError(f"plain step size must lie in (0, tau0={cfg.tau0}], got {tau}")
    trace = _base_trace(problem, cfg, "plain")
    u = problem.initial_iterate.copy()
    energy = trace.initial_energy
    for n in range(1, cfg.max_outer + 1):
        tic = time.perf_counter()
        try:
            corrections = compute_local_corrections(problem, u, cfg.omega, base_energy=energy)
            u = apply_step(u, corrections, tau)
            energy = eval_energy(problem.model, u)
        except SchwarzError as err:
            err.partial_trace = trace
            raise
        trace.records.append(
            IterationRecord(
                n=n,
                energy=energy,
                tau=tau,
                backtrack_trials=0,
                restarted=False,
                elapsed_ms=1e3 * (time.perf_counter() - tic),
            )
        )
        if _reached_target(cfg, energy):
            break
    return trace


def run_backtracking(problem: ProblemInstance, cfg: SolverConfig) -> Trace:
    """Additive Schwarz with the two-sided step-size search, tau(0) = tau0."""
    trace = _base_trace(problem, cfg, "backtracking")
    u = problem.initial_iterate.copy()
    energy = trace.initial_energy
    tau_prev = cfg.tau0
    for n in range(1, cfg.max_outer + 1):
        tic = time.perf_counter()
        try:
            corrections = compute_local_corrections(problem, u, cfg.omega, base_energy=energy)
            result = backtracking_search(problem, u, corrections, tau_prev, cfg, base_energy=energy)
            u = result.u_next
            if not result.vacuous:
                tau_prev = result.tau
            energy = eval_energy(problem.model, u)
        except SchwarzError as err:
            err.partial_trace = trace
            raise
        trace.records.append(
            IterationRecord(
                n=n,
                energy=energy,
                tau=result.tau,
                backtrack_trials=result.trials,
                restarted=False,
                elapsed_ms=1e3 * (time.perf_counter() - tic),
            )
        )
        if _reached_target(cfg, energy):
            break
    return trace


def run_momentum(
    problem: ProblemInstance, cfg: SolverConfig, keep_history: bool = False
) -> Trace:
    """Backtracking plus FISTA overrelaxation with gradient restart.

    Corrections and the acceptance rule are evaluated at the overrelaxed
    point v; the recorded energy is E(u) at the new iterate.  A restart
    resets t to 1 and beta to 0, so v coincides with u afterwards.

    When G is an indicator, the raw overrelaxation u + beta*(u - u_prev)
    overshoots every constraint the iterates are settling onto, which
    would leave all later acceptance tests comparing against +inf.  The
    driver therefore clips v back into dom G (models provide the exact
    projection; unconstrained ones the identity).  With v feasible the
    search always resolves against finite energies and the accepted point
    stays feasible, so the clip is the only place the constraint is ever
    enforced.
    """
    trace = _base_trace(problem, cfg, "momentum")
    if keep_history:
        trace.history = []
    u = problem.initial_iterate.copy()
    v = u.copy()
    t = 1.0
    tau_prev = cfg.tau0
    for n in range(1, cfg.max_outer + 1):
        tic = time.perf_counter()
        try:
            E_v = eval_energy(problem.model, v)
            corrections = compute_local_corrections(problem, v, cfg.omega, base_energy=E_v)
            result = backtracking_search(problem, v, corrections, tau_prev, cfg, base_energy=E_v)
            u_next = result.u_next
            if not result.vacuous:
                tau_prev = result.tau

            restarted = restart_test(v, u_next, u)
            if restarted:
                t_next, beta = 1.0, 0.0
            else:
                t_next, beta = momentum_update(t)
            v_next = problem.model.clip_to_domain(u_next + beta * (u_next - u))
            energy = eval_energy(problem.model, u_next)
        except SchwarzError as err:
            err.partial_trace = trace
            raise

        if keep_history:
            trace.history.append((v.copy(), u.copy(), u_next.copy()))
        trace.records.append(
            IterationRecord(
                n=n,
                energy=energy,
                tau=result.tau,
                backtrack_trials=result.trials,
                restarted=restarted,
                elapsed_ms=1e3 * (time.perf_counter() - tic),
                t=t_next,
                beta=beta,
            )
        )
        u, v, t = u_next, v_next, t_next
        if _reached_target(cfg, energy):
            break
    return trace

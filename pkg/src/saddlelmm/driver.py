"""The local minimax iteration and the sequential multi-solution workflow."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .directions import DirectionState, make_preconditioner, next_direction
from .grid import norm_a, read_field
from .peak import DegeneratePeak, PeakError, maximize_on_halfspace
from .problem import ProblemDef, energy, first_variation, gradient, initial_direction, make_problem, residual_sup
from .stepsize import ConfigError, LineSearchError, MeritFunction, RuleParams, line_search
from .subspace import SupportBasis, decompose, empty_basis, orthonormalize

log = logging.getLogger(__name__)

__all__ = [
    "RunConfig",
    "SolutionRecord",
    "LMMError",
    "PlanError",
    "METHOD_PRESETS",
    "method_params",
    "run_lmm",
    "find_sequence",
    "monitor_theory",
    "verify_record",
]

DISTINCTNESS = 0.1
TAU_MIN_NORM2 = 1e-16  # squared norm of the initial L-part below which tau is not measured


class LMMError(RuntimeError):
    """Run failure; ``record`` holds the partial trace when available."""

    def __init__(self, msg, record=None, status="failed"):
        super().__init__(msg)
        self.record = record
        self.status = status


class PlanError(ValueError):
    pass


METHOD_PRESETS = {
    "sd-armijo": {"direction": "sd", "rule": {"rule": "armijo", "sigma": 0.1, "lam": 0.1, "rho": 0.5}},
    "sd-strongwolfe": {"direction": "sd", "rule": {"rule": "strong-wolfe", "sigma1": 0.1, "sigma2": 0.4}},
    "cg-strongwolfe": {"direction": "cg-fr", "rule": {"rule": "strong-wolfe", "sigma1": 0.1, "sigma2": 0.4}},
}

METHOD_LABELS = {"sd-armijo": "SD-Armijo", "sd-strongwolfe": "SD-StrongWolfe", "cg-strongwolfe": "CG-StrongWolfe"}


def method_params(name: str) -> tuple[str, RuleParams]:
    try:
        m = METHOD_PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown method preset {name!r}; choose from {', '.join(METHOD_PRESETS)}") from None
    return m["direction"], RuleParams(**m["rule"])


@dataclass(frozen=True)
class RunConfig:
    """Everything one run of the iteration depends on."""

    label: str = "u1"
    problem: dict = field(default_factory=lambda: {"case": "nlse", "omega": 8.0})
    domain: object = "square"
    resolution: int = 129
    direction: str = "cg-fr"
    preconditioner: str = "identity"
    rule: RuleParams = field(default_factory=RuleParams)
    support: tuple = ()
    support_files: tuple = ()
    omega1: str = "Omega"
    omega2: str = "empty"
    grad_tol: float = 1e-5
    sup_res_tol: float = 5e-5
    inner_tol: float = 1e-8
    t_min: float = 1e-6
    max_outer_iters: int = 2000
    solver: dict = field(default_factory=lambda: {"rel_tol": 1e-10, "method": "direct"})
    deterministic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("grad_tol", "sup_res_tol", "inner_tol", "t_min"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_outer_iters < 0:
            raise ConfigError("max_outer_iters must be nonnegative")
        if self.direction not in ("sd", "psd", "cg-fr"):
            raise ConfigError(f"unknown direction {self.direction!r}")
        self.rule.validate(for_cg=self.direction == "cg-fr")
        if self.resolution < 3:
            raise ConfigError("resolution must be at least 3")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["support"] = list(self.support)
        d["support_files"] = [str(s) for s in self.support_files]
        d["domain"] = self.domain if isinstance(self.domain, (str, dict)) else str(self.domain)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def build_problem(self) -> ProblemDef:
        params = {k: v for k, v in self.problem.items() if k != "case"}
        return make_problem(
            self.problem["case"],
            domain=self.domain,
            resolution=self.resolution,
            solver=self.solver,
            **params,
        )


@dataclass(eq=False)
class SolutionRecord:
    label: str
    u: np.ndarray
    energy: float
    grad_norm: float
    sup_residual: float
    iterations: int
    phi_evals: int
    linear_solves: int
    wall_time: float
    converged: bool
    status: str
    trace: list
    linesearch_trace: list
    direction_trace: list
    config: dict
    config_hash: str
    support_ids: tuple
    support_energies: tuple = ()
    distinctness: float = math.nan
    v: Optional[np.ndarray] = None
    t: float = math.nan
    problem: Optional[ProblemDef] = field(default=None, repr=False)
    notes: list = field(default_factory=list)

    def metadata(self) -> dict:
        return {
            "label": self.label,
            "energy": self.energy,
            "grad_norm": self.grad_norm,
            "sup_residual": self.sup_residual,
            "iterations": self.iterations,
            "phi_evals": self.phi_evals,
            "linear_solves": self.linear_solves,
            "wall_time": self.wall_time,
            "converged": self.converged,
            "status": self.status,
            "config_hash": self.config_hash,
            "support": list(self.support_ids),
            "support_energies": list(self.support_energies),
            "distinctness": self.distinctness,
            "t": self.t,
            "notes": list(self.notes),
            "config": self.config,
        }


def _support_basis(problem, solutions, ids):
    if not solutions:
        return empty_basis(problem.operator)
    return orthonormalize(solutions, problem.operator, source_ids=tuple(ids))


def _initial_peak(problem, L, state, c0, cfg):
    last = None
    for t0 in (1.0, 2.0, 4.0, 8.0):
        try:
            return maximize_on_halfspace(problem, L, state.v, init=(t0, c0), tol=cfg.inner_tol, t_min=cfg.t_min)
        except DegeneratePeak as exc:
            log.info("initial peak degenerate from t0=%g; retrying", t0)
            last = exc
    raise last


def run_lmm(
    cfg: RunConfig,
    problem: ProblemDef | None = None,
    support: Sequence[np.ndarray] = (),
    support_ids: Sequence = (),
    v0: np.ndarray | None = None,
    observer=None,
) -> SolutionRecord:
    """Run the normalized local minimax iteration for one solution.

    ``support`` holds the solutions spanning ``L``; when empty, the files in
    ``cfg.support_files`` are read instead.  ``v0`` overrides the seeded
    initial direction.  ``observer(k, state, peak, L, info)`` is called
    once per iteration after the direction is chosen.
    """
    t_start = time.perf_counter()
    if problem is None:
        problem = cfg.build_problem()
    op = problem.operator
    support = list(support)
    support_ids = list(support_ids) or list(cfg.support)
    if not support and cfg.support_files:
        for path in cfg.support_files:
            _, vals = read_field(path, problem.mesh)
            support.append(vals)
        support_ids = [str(p) for p in cfg.support_files]
    if len(support_ids) != len(support):
        support_ids = [f"s{j}" for j in range(len(support))]
    L = _support_basis(problem, support, support_ids)
    support_energies = tuple(energy(problem, s) for s in support)

    if v0 is None:
        v0 = initial_direction(problem, cfg.omega1, cfg.omega2)
    state = decompose(v0, L)
    if support:
        top = int(np.argmax(support_energies))
        c0 = L.coords(support[top])
    else:
        c0 = np.zeros(0)
    solves0 = op.solve_count
    ds = DirectionState(kind=cfg.direction, sigma2=cfg.rule.sigma2)
    precond = make_preconditioner(cfg.preconditioner, op) if cfg.direction == "psd" else None
    fallback = RuleParams(rule="armijo", sigma=0.1, lam=0.1, rho=0.5)

    trace, ls_trace, dir_trace = [], [], []
    notes: list[str] = []
    phi_evals = 0
    coords0 = state.coords.copy()
    c0_norm2 = float(coords0 @ coords0)
    vperp0 = state.vperp_norm
    tau_prod = 1.0
    alpha_prev = math.nan
    status = "running"

    def make_record(peak, status, k, grad_norm, sup):
        converged = status == "converged"
        dist = math.nan
        if support:
            nu = norm_a(op, peak.w)
            dist = min(norm_a(op, peak.w - s) for s in support) / nu if nu > 0 else math.nan
        return SolutionRecord(
            label=cfg.label,
            u=peak.w.copy(),
            energy=peak.value,
            grad_norm=grad_norm,
            sup_residual=sup,
            iterations=k,
            phi_evals=phi_evals,
            linear_solves=op.solve_count - solves0,
            wall_time=time.perf_counter() - t_start,
            converged=converged,
            status=status,
            trace=trace,
            linesearch_trace=ls_trace,
            direction_trace=dir_trace,
            config=cfg.snapshot(),
            config_hash=cfg.config_hash(),
            support_ids=tuple(support_ids),
            support_energies=support_energies,
            distinctness=dist,
            v=state.v.copy(),
            t=peak.t,
            problem=problem,
            notes=notes,
        )

    try:
        peak = _initial_peak(problem, L, state, c0, cfg)
    except PeakError as exc:
        raise LMMError(f"{cfg.label}: initial peak selection failed: {exc}", status="degenerate-peak") from exc

    k = 0
    while True:
        r = first_variation(problem, peak.w)
        g = gradient(problem, peak.w, r)
        g2 = max(float(g @ r), 0.0)
        grad_norm = math.sqrt(g2)
        sup = residual_sup(problem, peak.w, r)
        if L.dim and c0_norm2 > TAU_MIN_NORM2:
            tau = float(state.coords @ coords0) / c0_norm2
        else:
            # v0 has no L-part beyond round-off, so the ratio is noise; the
            # product of the step factors is the same quantity
            tau = tau_prod
        row = {
            "k": k,
            "energy": peak.value,
            "grad_norm": grad_norm,
            "sup_residual": sup,
            "t": peak.t,
            "tau": tau,
            "vperp_norm": state.vperp_norm,
            "dist_to_L": peak.t * state.vperp_norm,
            "first_order_res": peak.first_order_res,
            "alpha": math.nan,
            "evals": 0,
            "rule": "",
            "fallback": 0,
            "energy_change": math.nan,
        }
        trace.append(row)
        if grad_norm <= cfg.grad_tol and sup <= cfg.sup_res_tol:
            status = "converged"
            break
        if k >= cfg.max_outer_iters:
            status = "max-iterations"
            rec = make_record(peak, status, k, grad_norm, sup)
            raise LMMError(f"{cfg.label}: no convergence within {cfg.max_outer_iters} iterations", rec, status)

        try:
            info = next_direction(ds, g, r, state, L, peak.t, alpha_prev, precond)
        except Exception as exc:
            rec = make_record(peak, "direction-failure", k, grad_norm, sup)
            raise LMMError(f"{cfg.label}: direction failed at k={k}: {exc}", rec, "direction-failure") from exc
        if observer is not None:
            observer(k, state, peak, L, info)
        dir_trace.append(
            info.row(k)
            | {"cone_lo": info.cone[0], "cone_hi": info.cone[1], "cone_ok": int(info.cone_ok),
               "a1_ok": int(info.a1_ok), "a2_ok": int(info.a2_ok)}
        )
        merit = MeritFunction(problem, L, state, info.d, peak, inner_tol=cfg.inner_tol, t_min=cfg.t_min)
        p0 = merit.at_zero()
        used_fallback = False
        try:
            step = line_search(merit, p0, cfg.rule)
        except LineSearchError as exc:
            for j, (a, ph, dph, fl) in enumerate(exc.trace):
                ls_trace.append({"iter": k, "eval": j + 1, "alpha": a, "phi": ph, "dphi": dph, "rule_flags": fl})
            phi_evals += merit.evals
            log.warning("%s: %s rule failed at k=%d (%s); Armijo fallback", cfg.label, cfg.rule.rule, k, exc)
            notes.append(f"k={k}: {cfg.rule.rule} failed ({exc}); Armijo fallback")
            evals_before = merit.evals
            try:
                step = line_search(merit, p0, fallback)
            except LineSearchError as exc2:
                phi_evals += merit.evals - evals_before
                rec = make_record(peak, "line-search-failure", k, grad_norm, sup)
                raise LMMError(f"{cfg.label}: line search failed at k={k}: {exc2}", rec, "line-search-failure") from exc2
            phi_evals += merit.evals - evals_before
            used_fallback = True
            ds.force_restart = True
        else:
            phi_evals += merit.evals
        for j, (a, ph, dph, fl) in enumerate(step.trace):
            ls_trace.append({"iter": k, "eval": j + 1, "alpha": a, "phi": ph, "dphi": dph, "rule_flags": fl})
        pt = step.point
        change = pt.change if pt.change is not None else pt.phi - p0.phi
        row.update(alpha=pt.alpha, evals=step.evals, rule=step.rule, fallback=int(used_fallback), energy_change=change)
        ds.remember(info.g, info.d, info.g2, info.gd_over_g2, peak.t, op)
        ds.set_step(pt.alpha)
        alpha_prev = pt.alpha
        tau_prod /= math.sqrt(1.0 + pt.alpha**2 * merit.d_norm2)
        state, peak = pt.state, pt.peak
        k += 1

    rec = make_record(peak, status, k, grad_norm, sup)
    if support and rec.distinctness < DISTINCTNESS:
        rec.notes.append(f"solution within {rec.distinctness:.3g} of a support solution")
        log.warning("%s: found solution is close to a support solution (%.3g)", cfg.label, rec.distinctness)
    log.info(
        "%s: converged in %d iterations, E = %.6f, |g| = %.2e, sup = %.2e",
        cfg.label, k, rec.energy, grad_norm, sup,
    )
    return rec


def verify_record(rec: SolutionRecord, problem: ProblemDef | None = None, grad_tol=None, sup_res_tol=None) -> dict:
    """Recompute both stopping criteria from the stored field."""
    problem = problem or rec.problem
    r = first_variation(problem, rec.u)
    g = gradient(problem, rec.u, r)
    gn = math.sqrt(max(float(g @ r), 0.0))
    sup = residual_sup(problem, rec.u, r)
    gt = rec.config.get("grad_tol", 1e-5) if grad_tol is None else grad_tol
    st = rec.config.get("sup_res_tol", 5e-5) if sup_res_tol is None else sup_res_tol
    return {"grad_norm": gn, "sup_residual": sup, "energy": energy(problem, rec.u), "ok": gn <= gt and sup <= st}


def _check_plan(plan: Sequence[RunConfig]):
    seen = {}
    for pos, cfg in enumerate(plan):
        if cfg.label in seen:
            raise PlanError(f"duplicate plan label {cfg.label!r}")
        for dep in cfg.support:
            if dep not in seen:
                later = [c.label for c in plan[pos + 1:]]
                where = "a later entry" if dep in later else "no entry"
                raise PlanError(f"entry {cfg.label!r} depends on {dep!r}, which is {where}")
        seen[cfg.label] = pos


def find_sequence(
    plan: Sequence[RunConfig],
    problem: ProblemDef | None = None,
    keep_going: bool = True,
    observe=None,
) -> list:
    """Run plan entries in order, feeding found solutions into later ``L``.

    Returns one item per entry: a :class:`SolutionRecord` or the
    :class:`LMMError` explaining why the entry failed or was skipped.
    ``observe(cfg, problem)``, when given, returns the ``observer`` passed
    to :func:`run_lmm` for that entry (or None).
    """
    plan = list(plan)
    _check_plan(plan)
    problems: dict = {}
    found: dict = {}
    failed: set = set()
    out = []
    for cfg in plan:
        bad = [d for d in cfg.support if d in failed]
        if bad:
            err = LMMError(f"{cfg.label}: skipped because {', '.join(bad)} failed", status="skipped")
            failed.add(cfg.label)
            out.append(err)
            continue
        key = (json.dumps(cfg.problem, sort_keys=True), json.dumps(cfg.domain, sort_keys=True, default=str),
               cfg.resolution, json.dumps(cfg.solver, sort_keys=True))
        prob = problem
        if prob is None:
            prob = problems.get(key)
            if prob is None:
                prob = problems[key] = cfg.build_problem()
        sols = [found[d].u for d in cfg.support]
        if sols:
            # the initial guess uses the member of L with the highest critical
            # value; by convention it is listed last
            energies = [found[d].energy for d in cfg.support]
            top = int(np.argmax(energies))
            if energies[top] > energies[-1] * (1 + 1e-6) + 1e-12:
                log.warning(
                    "%s: %s has the highest critical value in L (%.6g) but %s is listed last (%.6g)",
                    cfg.label, cfg.support[top], energies[top], cfg.support[-1], energies[-1],
                )
        try:
            obs = observe(cfg, prob) if observe is not None else None
            rec = run_lmm(cfg, prob, sols, cfg.support, observer=obs)
        except (LMMError, PeakError, ArithmeticError, LineSearchError) as exc:
            if not isinstance(exc, LMMError):
                exc = LMMError(f"{cfg.label}: {exc}", status="failed")
            log.error("%s", exc)
            failed.add(cfg.label)
            out.append(exc)
            if not keep_going:
                break
            continue
        found[cfg.label] = rec
        out.append(rec)
    return out


def monitor_theory(rec: SolutionRecord, tol: float = 1e-12) -> dict:
    """Post-hoc checks of the trace against the convergence theory."""
    tr = rec.trace
    E = np.array([row["energy"] for row in tr])
    g = np.array([row["grad_norm"] for row in tr])
    alpha = np.array([row["alpha"] for row in tr])
    tau = np.array([row["tau"] for row in tr])
    vp = np.array([row["vperp_norm"] for row in tr])
    dist = np.array([row["dist_to_L"] for row in tr])
    t_min = rec.config.get("t_min", 1e-6)
    steps = np.isfinite(alpha)
    partial = np.cumsum(np.where(steps, alpha * g**2, 0.0))
    scale = max(1.0, float(np.max(np.abs(E)))) if E.size else 1.0
    dirs = rec.direction_trace
    return {
        "partial_sums": partial.tolist(),
        "min_grad_norm": float(np.min(g)) if g.size else math.nan,
        "final_grad_norm": float(g[-1]) if g.size else math.nan,
        "energy_nonincreasing": bool(np.all(np.diff(E) <= tol * scale)),
        # accepted steps, judged by the accurately evaluated energy change
        "energy_strictly_decreasing": bool(all(row["energy_change"] < 0 for row in tr[:-1])),
        "tau_nonincreasing": bool(np.all(np.diff(tau) <= tol)),
        "tau_in_unit_interval": bool(np.all((tau > 0) & (tau <= 1 + tol))),
        "vperp_nondecreasing": bool(np.all(np.diff(vp) >= -tol)),
        "dist_to_L": dist.tolist(),
        "dist_lower_bound": t_min * (vp[0] if vp.size else math.nan),
        "dist_bound_ok": bool(np.all(dist >= t_min * vp[0])) if vp.size else True,
        "cone_ok": all(row.get("cone_ok", 1) for row in dirs),
        "a1_ok": all(row.get("a1_ok", 1) for row in dirs),
        "a2_ok": all(row.get("a2_ok", 1) for row in dirs),
        "fallback_steps": int(sum(row["fallback"] for row in tr)),
    }

"""Conditioning and convergence diagnostics on small dense instances.

The checks here are numeric witnesses: they evaluate both sides of each
inequality on a concrete Hessian and report the slack. Nothing is proved.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FeatureHeatTable, Preconditioner, build_heat_table, build_preconditioner
from .errors import ConfigError, PreconditionViolation, ResourceError, SingularMatrixError, StructuralError
from .models import HESSIAN_CAP, QuadraticCertificate, QuadraticTask

__all__ = [
    "SLACK_TOL",
    "TheoremConstants",
    "ConditioningReport",
    "singular_values",
    "condition_number",
    "condition_number_by_similarity",
    "preconditioned_hessian",
    "is_locally_convex",
    "check_theorem1",
    "check_theorem2",
    "preconditioned_grad_norm",
    "theorem3_terms",
    "theorem3_rhs",
    "theorem3_rate",
    "theorem3_step_size",
    "theorem3_witness",
    "optimality_gap_bound",
    "random_certified_instance",
    "run_theorem_suite",
    "write_reports",
]

SLACK_TOL = 1e-9


@dataclass(frozen=True)
class TheoremConstants:
    """Hessian eigenvalue bounds and the smoothness/noise constants.

    ``rho1 == rho2`` is accepted: it is the degenerate but valid certificate
    of a problem whose local Hessians are all ``rho * I``.
    """

    rho1: float
    rho2: float
    alpha: float = 0.0
    L: float | None = None
    sigma2: float = 0.0
    G2: float = 0.0

    def __post_init__(self):
        if not 0 < self.rho1 <= self.rho2:
            raise ConfigError("need 0 < rho1 <= rho2")
        if not 0 <= self.alpha < 1:
            raise ConfigError("alpha must lie in [0, 1)")
        if self.sigma2 < 0 or self.G2 < 0:
            raise ConfigError("sigma2 and G2 must be non-negative")

    @property
    def mu0(self) -> float:
        return self.rho1 - self.alpha * (self.rho1 + self.rho2)

    @property
    def smoothness(self) -> float:
        return self.rho2 if self.L is None else self.L

    @classmethod
    def from_certificate(cls, cert: QuadraticCertificate, **kw) -> "TheoremConstants":
        return cls(cert.rho1, cert.rho2, cert.alpha, **kw)


@dataclass
class ConditioningReport:
    """Measured spectra plus every bound a check evaluated.

    ``checks`` maps a check name to ``(bound, measured, passed)``; for upper
    bounds ``measured <= bound`` passes, for lower bounds ``bound <= measured``.
    """

    kappa_h: float
    sigma_min_h: float
    sigma_max_h: float
    kappa_h_hat: float | None = None
    sigma_min_h_hat: float | None = None
    sigma_max_h_hat: float | None = None
    checks: dict[str, tuple[float, float, bool]] = field(default_factory=dict)
    label: str = ""

    @property
    def passed(self) -> bool:
        return all(ok for _, _, ok in self.checks.values())

    def records(self) -> list[dict]:
        return [{"instance": self.label, "check": name, "bound": b, "measured": m, "passed": ok}
                for name, (b, m, ok) in self.checks.items()]


def _relative_slack(small: float, large: float) -> float:
    """Slack of ``small <= large`` relative to the larger magnitude."""
    return (large - small) / max(abs(large), abs(small), 1e-300)


def _upper(report, name, bound, measured):
    report.checks[name] = (float(bound), float(measured), bool(_relative_slack(measured, bound) >= -SLACK_TOL))


def _lower(report, name, bound, measured):
    report.checks[name] = (float(bound), float(measured), bool(_relative_slack(bound, measured) >= -SLACK_TOL))


def _symmetric(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise StructuralError(f"expected a square matrix, got shape {H.shape}")
    if H.shape[0] > HESSIAN_CAP:
        raise ResourceError(f"dense eigen-solve capped at M={HESSIAN_CAP}")
    if not np.allclose(H, H.T, rtol=1e-12, atol=1e-14):
        raise StructuralError("matrix is not symmetric")
    return H


def singular_values(H) -> np.ndarray:
    """Singular values of a symmetric matrix, ascending."""
    return np.sort(np.abs(np.linalg.eigvalsh(_symmetric(H))))


def condition_number(H) -> float:
    s = singular_values(H)
    if s[0] <= 1e-12 * s[-1]:
        raise SingularMatrixError(f"matrix is numerically singular (sigma_min={s[0]:.3e})", float(s[0]))
    return float(s[-1] / s[0])


def _diag_of(D, M: int) -> np.ndarray:
    d = D.diag if isinstance(D, Preconditioner) else np.asarray(D, dtype=np.float64)
    if d.ndim == 2:
        d = np.diag(d)
    if d.shape != (M,):
        raise StructuralError(f"preconditioner of length {d.shape} does not match M={M}")
    if np.any(d <= 0):
        raise StructuralError("preconditioner must be positive")
    return d


def preconditioned_hessian(H, D) -> np.ndarray:
    """``D^{1/2} H D^{1/2}``, exactly symmetric for symmetric ``H``."""
    H = _symmetric(H)
    sd = np.sqrt(_diag_of(D, H.shape[0]))
    return H * np.outer(sd, sd)


def condition_number_by_similarity(H, D) -> float:
    """Condition number of ``D^{1/2} H D^{1/2}`` from the spectrum of ``D H``.

    ``D H`` is similar to the symmetrized product, so its eigenvalues agree;
    this is an independent route to the same number.
    """
    H = _symmetric(H)
    d = _diag_of(D, H.shape[0])
    ev = np.abs(np.linalg.eigvals(d[:, None] * H).real)
    return float(ev.max() / ev.min())


def is_locally_convex(H, tol: float = 1e-6) -> bool:
    """Empirical convexity test: smallest Hessian eigenvalue above ``tol``."""
    return bool(np.linalg.eigvalsh(_symmetric(H))[0] > tol)


def _require_pd(H: np.ndarray, what: str) -> np.ndarray:
    ev = np.linalg.eigvalsh(H)
    if ev[0] <= 0:
        raise PreconditionViolation(f"{what}: Hessian is not positive definite (lambda_min={ev[0]:.3e})")
    return ev


def check_theorem1(H, heat: FeatureHeatTable, consts: TheoremConstants, label: str = "") -> ConditioningReport:
    """Lower bound ``kappa(H) >= n_max * mu0 / (n_min * rho2)`` in a convex area."""
    H = _symmetric(H)
    if consts.mu0 <= 0:
        raise PreconditionViolation("mu0 = rho1 - alpha (rho1 + rho2) must be positive")
    ev = _require_pd(H, "theorem 1")
    report = ConditioningReport(float(ev[-1] / ev[0]), float(ev[0]), float(ev[-1]), label=label)
    bound = heat.n_max * consts.mu0 / (heat.n_min * consts.rho2)
    _lower(report, "theorem1.kappa_lower", bound, report.kappa_h)
    return report


def check_theorem2(H, D, consts: TheoremConstants, heat: FeatureHeatTable, convex: bool | None = None,
                   label: str = "") -> ConditioningReport:
    """Upper bounds on ``kappa(H)`` and ``kappa(D^{1/2} H D^{1/2})``.

    Always checks ``kappa(H) <= k``, ``kappa(H_hat) <= k_hat`` and
    ``k_hat <= k``. The convex-area clause ``kappa(H_hat) <= rho2 / mu0`` is
    checked when ``H`` is positive definite (or demanded via ``convex=True``).
    """
    H = _symmetric(H)
    Hh = preconditioned_hessian(H, D)
    s = singular_values(H)
    sh = singular_values(Hh)
    if s[0] <= 1e-12 * s[-1]:
        raise SingularMatrixError("global Hessian is singular", float(s[0]))
    report = ConditioningReport(float(s[-1] / s[0]), float(s[0]), float(s[-1]),
                                float(sh[-1] / sh[0]), float(sh[0]), float(sh[-1]), label=label)
    k = consts.rho2 * heat.n_max / (heat.N * s[0])
    k_hat = consts.rho2 / sh[0]
    _upper(report, "theorem2.kappa_h_le_k", k, report.kappa_h)
    _upper(report, "theorem2.kappa_hhat_le_khat", k_hat, report.kappa_h_hat)
    _upper(report, "theorem2.khat_le_k", k, k_hat)

    is_pd = bool(np.linalg.eigvalsh(H)[0] > 0)
    if convex is None:
        convex = is_pd
    if convex:
        if not is_pd:
            raise PreconditionViolation("theorem 2 convex clause needs a positive definite Hessian")
        if consts.mu0 <= 0:
            raise PreconditionViolation("mu0 must be positive for the convex clause")
        _upper(report, "theorem2.kappa_hhat_convex", consts.rho2 / consts.mu0, report.kappa_h_hat)
    return report


def preconditioned_grad_norm(grad, D) -> float:
    """``grad^T D grad`` for diagonal ``D``."""
    g = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise StructuralError("gradient has non-finite entries")
    d = _diag_of(D, g.size)
    return float(np.sum(d * g * g))


def theorem3_terms(consts: TheoremConstants, f_init_gap: float, gamma: float, T: int, I: int, N: int,
                   K: int, n_min: float) -> tuple[float, float, float, float]:
    """The four summands of the stationarity bound, in order."""
    if n_min <= 0:
        raise ConfigError("n_min must be positive")
    if not (gamma > 0 and T >= 1 and I >= 1 and N >= 1 and K >= 1):
        raise ConfigError("gamma, T, I, N, K must be positive")
    L, s2, G2 = consts.smoothness, consts.sigma2, consts.G2
    return (
        2.0 * f_init_gap / (gamma * T),
        2.0 * gamma * L * s2 / n_min,
        4.0 * N * gamma ** 2 * I ** 2 * G2 * L ** 2 / n_min,
        2.0 * gamma * N * I ** 2 * G2 * L / (n_min * K),
    )


def theorem3_rhs(consts: TheoremConstants, f_init_gap: float, gamma: float, T: int, I: int, N: int,
                 K: int, n_min: float) -> float:
    return float(sum(theorem3_terms(consts, f_init_gap, gamma, T, I, N, K, n_min)))


def theorem3_rate(N: int, n_min: float, K: int, T: int) -> float:
    """``sqrt(N / (n_min K T))``, the rate under the matching step size."""
    return math.sqrt(N / (n_min * K * T))


def theorem3_step_size(N: int, n_min: float, K: int, T: int, scale: float = 1.0) -> float:
    """Step size ``scale * sqrt(n_min K / (N T))``."""
    return scale * math.sqrt(n_min * K / (N * T))


def optimality_gap_bound(pgn: float, mu0: float) -> float:
    """Upper bound ``pgn / (2 mu0)`` on ``f(X) - f(X*_local)`` in a convex area."""
    if not mu0 > 0:
        raise ConfigError("mu0 must be positive")
    return pgn / (2.0 * mu0)


def theorem3_witness(task: QuadraticTask, gamma: float, T: int, K: int | None = None, I: int = 1,
                     seed: int = 0) -> dict:
    """Run noiseless FedSubAvg on a certified quadratic and evaluate both sides.

    The measured side averages ``grad f^T D grad f`` over the iterates
    ``X^1 .. X^T``. ``G2`` is the largest squared local gradient norm met
    along the run, so the assumption it feeds holds by construction.
    """
    from .algorithms import LocalTrainConfig, StrategyState, run_round

    if task.certificate is None:
        raise PreconditionViolation("task carries no Hessian certificate")
    if task.noise != 0.0:
        raise PreconditionViolation("witness runs are noiseless")
    N = task.N
    K = N if K is None else K
    M = task.M
    heat = build_heat_table([c.index_set for c in task.clients], M)
    D = build_preconditioner(heat)
    x = task.init_model()
    f_star = task.objective(task.minimizer())
    gap = task.objective(x) - f_star
    cfg = LocalTrainConfig(gamma, iterations=I, batch_size=1)
    state = StrategyState("fedsubavg", M)
    pgns, G2 = [], 0.0
    for r in range(1, T + 1):
        pgns.append(preconditioned_grad_norm(task.exact_gradient(x), D))
        for cid, c in enumerate(task.clients):
            idx = c.index_set.indices
            g = task.local_hessian(cid) @ (x[idx] - task._c[cid])
            G2 = max(G2, float(g @ g))
        run_round(x, state, task, K, cfg, r, seed, heat, D)
    cert = task.certificate
    consts = TheoremConstants(cert.rho1, cert.rho2, cert.alpha, L=cert.L, sigma2=0.0, G2=G2)
    terms = theorem3_terms(consts, gap, gamma, T, I, N, K, heat.n_min)
    measured = float(np.mean(pgns))
    return {"measured": measured, "rhs": float(sum(terms)), "terms": terms, "gap": gap, "G2": G2,
            "passed": bool(measured <= float(sum(terms))), "T": T, "N": N, "K": K}


# --------------------------------------------------------------------------- instances

def _random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _index_sets(rng: np.random.Generator, N: int, M: int) -> list[np.ndarray]:
    # index 0 plays the dense layer; the rest get log-uniform heat in [1/N, 1]
    p = np.exp(rng.uniform(np.log(1.0 / N), 0.0, size=M))
    p[0] = 1.0
    hold = rng.random((N, M)) < p
    hold[:, 0] = True
    for m in np.flatnonzero(~hold.any(axis=0)):
        hold[rng.integers(N), m] = True
    return [np.flatnonzero(row) for row in hold]


def random_certified_instance(rng: np.random.Generator, N: int, M: int, rho1: float = 1.0,
                              rho2: float = 4.0, alpha: float = 0.0, indefinite: bool = False,
                              max_tries: int = 50) -> QuadraticTask:
    """Random quadratic mixture whose local Hessians satisfy the bounds by construction.

    Each ``A_i = Q diag(lambda) Q^T`` with ``lambda`` in ``[rho1, rho2]``; a
    client marked concave uses ``-A_i``. In the convex regime a client is
    made concave only if every parameter it holds keeps its concave share at
    or below ``alpha``. With ``indefinite`` each client flips a fair coin and
    only non-singularity of the global Hessian is enforced.
    """
    if not indefinite and not 0 <= alpha < rho1 / (rho1 + rho2):
        raise ConfigError("alpha must satisfy (1 - alpha) rho1 - alpha rho2 > 0")
    for _ in range(max_tries):
        sets = _index_sets(rng, N, M)
        counts = np.zeros(M)
        for s in sets:
            counts[s] += 1
        concave = np.zeros(N, dtype=bool)
        if indefinite:
            concave = rng.random(N) < 0.5
        elif alpha > 0:
            k = np.zeros(M)
            for i in rng.permutation(N):
                if np.all(k[sets[i]] + 1 <= alpha * counts[sets[i]]):
                    concave[i] = True
                    k[sets[i]] += 1
        hess = []
        for i, s in enumerate(sets):
            Q = _random_rotation(rng, s.size)
            lam = rng.uniform(rho1, rho2, size=s.size)
            lam[0], lam[-1] = rho1, rho2
            A = (Q * lam) @ Q.T
            A = 0.5 * (A + A.T)
            hess.append(-A if concave[i] else A)
        centers = [rng.normal(size=s.size) for s in sets]
        if indefinite:
            frac = 0.0
        else:
            frac = alpha
        cert = QuadraticCertificate(rho1, rho2, float(frac), tuple(bool(c) for c in concave))
        task = QuadraticTask(M, sets, hess, centers, certificate=cert, init=rng.normal(size=M))
        sv = singular_values(task.exact_hessian())
        if sv[0] > 1e-6 * sv[-1]:
            return task
    raise ConfigError("could not draw a non-singular instance")


def _validate_certificate(task: QuadraticTask) -> None:
    cert = task.certificate
    for cid in range(task.N):
        ev = np.linalg.eigvalsh(task.local_hessian(cid))
        mag = np.abs(ev)
        if mag.min() < cert.rho1 * (1 - 1e-9) or mag.max() > cert.rho2 * (1 + 1e-9):
            raise PreconditionViolation(f"client {cid} violates its Hessian certificate")
        if cert.concave[cid] != bool(ev[-1] < 0):
            raise PreconditionViolation(f"client {cid} curvature sign disagrees with its certificate")


def run_theorem_suite(n_instances: int = 100, seed: int = 0, max_N: int = 50, max_M: int = 16,
                      rho1: float = 1.0, rho2: float = 4.0) -> list[ConditioningReport]:
    """Conditioning-bound checks over random convex instances plus indefinite mixtures.

    Convex instances draw ``alpha`` uniformly below ``rho1 / (rho1 + rho2)``.
    Every indefinite mixture contributes the general ``k_hat <= k`` clauses.
    """
    rng = np.random.default_rng(seed)
    reports = []
    alpha_max = rho1 / (rho1 + rho2)
    for n in range(n_instances):
        N = int(rng.integers(2, max_N + 1))
        M = int(rng.integers(2, max_M + 1))
        alpha = float(rng.uniform(0.0, 0.9 * alpha_max))
        task = random_certified_instance(rng, N, M, rho1, rho2, alpha)
        _validate_certificate(task)
        heat = build_heat_table([c.index_set for c in task.clients], M)
        D = build_preconditioner(heat)
        H = task.exact_hessian()
        consts = TheoremConstants(rho1, rho2, alpha)
        r1 = check_theorem1(H, heat, consts, label=f"convex-{n}")
        r2 = check_theorem2(H, D, consts, heat, convex=True, label=f"convex-{n}")
        r1.checks.update(r2.checks)
        r1.kappa_h_hat, r1.sigma_min_h_hat, r1.sigma_max_h_hat = r2.kappa_h_hat, r2.sigma_min_h_hat, r2.sigma_max_h_hat
        reports.append(r1)

        itask = random_certified_instance(rng, N, M, rho1, rho2, indefinite=True)
        _validate_certificate(itask)
        iheat = build_heat_table([c.index_set for c in itask.clients], M)
        reports.append(check_theorem2(itask.exact_hessian(), build_preconditioner(iheat),
                                      TheoremConstants(rho1, rho2), iheat, convex=False,
                                      label=f"indefinite-{n}"))
    return reports


def write_reports(reports: Sequence[ConditioningReport], path) -> int:
    """One JSON record per check; returns the number of failed checks."""
    failed = 0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rep in reports:
            for rec in rep.records():
                failed += not rec["passed"]
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return failed

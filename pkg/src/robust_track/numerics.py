"""Shared numerical kernels: fixed-step RK4, continuous/discrete Riccati
solvers, and the semidefinite feasibility solve used by the robust
longitudinal-lateral gain synthesis.

The SDP is handed to cvxpy (CLARABEL, SCS fallback); a result is only
reported feasible after an in-repo eigenvalue re-check of the assembled
block matrix, which is a separate code path from the solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg


class IntegrationError(Exception):
    """A state derivative came back non-finite."""

    def __init__(self, message: str, component: int | None = None):
        super().__init__(message)
        self.component = component


class SynthesisError(Exception):
    """Gain synthesis failed (non-stabilizable pair, eigen-split failure...)."""


def integrate_rk4(deriv: Callable[[np.ndarray], np.ndarray],
                  x0: np.ndarray, dt: float) -> np.ndarray:
    """One classical 4th-order Runge-Kutta step of ``x' = deriv(x)``."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    x0 = np.asarray(x0, dtype=float)

    k1 = np.asarray(deriv(x0), dtype=float)
    _check_finite(k1)
    k2 = np.asarray(deriv(x0 + 0.5 * dt * k1), dtype=float)
    _check_finite(k2)
    k3 = np.asarray(deriv(x0 + 0.5 * dt * k2), dtype=float)
    _check_finite(k3)
    k4 = np.asarray(deriv(x0 + dt * k3), dtype=float)
    _check_finite(k4)
    return x0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_finite(k: np.ndarray) -> None:
    if not np.all(np.isfinite(k)):
        bad = int(np.flatnonzero(~np.isfinite(np.atleast_1d(k)))[0])
        raise IntegrationError(f"non-finite derivative in component {bad}", component=bad)


def solve_care(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Solve A'P + PA + Q - P B R^-1 B' P = 0 for the stabilizing P > 0.

    Uses the stable invariant subspace of the Hamiltonian matrix, extracted
    with an ordered real Schur decomposition; robust for the small systems
    handled here (n <= 6).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n or Q.shape != (n, n):
        raise ValueError("inconsistent Riccati dimensions")

    try:
        r_inv = np.linalg.inv(R)
    except np.linalg.LinAlgError as exc:
        raise SynthesisError("R is singular") from exc

    ham = np.block([[A, -B @ r_inv @ B.T],
                    [-Q, -A.T]])
    try:
        _, U, n_stable = scipy.linalg.schur(ham, sort="lhp")
    except Exception as exc:  # LAPACK reorder failure
        raise SynthesisError(f"Hamiltonian eigen-split failed: {exc}") from exc
    if n_stable != n:
        raise SynthesisError(
            f"Hamiltonian has {n_stable} stable eigenvalues, expected {n}; "
            "the pair (A, B) is likely not stabilizable")

    u11 = U[:n, :n]
    u21 = U[n:, :n]
    try:
        P = np.linalg.solve(u11.T, u21.T).T
    except np.linalg.LinAlgError as exc:
        raise SynthesisError("singular invariant-subspace basis") from exc
    P = 0.5 * (P + P.T)

    residual = A.T @ P + P @ A + Q - P @ B @ r_inv @ B.T @ P
    scale = 1.0 + np.linalg.norm(P, "fro")
    if np.linalg.norm(residual, "fro") > 1e-8 * scale:
        raise SynthesisError("Riccati residual out of tolerance")
    if np.any(np.linalg.eigvalsh(P) <= 0.0) and Q.any():
        raise SynthesisError("Riccati solution is not positive definite")
    return P


def solve_dare(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
               tol: float = 1e-12, max_iter: int = 10000) -> np.ndarray:
    """Fixed-point iteration for the discrete Riccati equation."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        bpb = R + B.T @ P @ B
        gain = np.linalg.solve(bpb, B.T @ P @ A)
        P_next = A.T @ P @ A - A.T @ P @ B @ gain + Q
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol * (1.0 + np.max(np.abs(P_next))):
            return P_next
        P = P_next
    raise SynthesisError("discrete Riccati iteration did not converge")


def dlqr_gain(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Discrete LQR gain K such that u = -K x is optimal."""
    P = solve_dare(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


# ---------------------------------------------------------------------------
# Robust state-feedback LMI
# ---------------------------------------------------------------------------

@dataclass
class SdpProblem:
    """One uncertain-system stabilization block, affine in (P, Y, eps).

    ``a_nom``/``b_nom`` are the nominal discrete matrices, ``n_a``/``n_b``
    the stacked vertex deviation matrices, ``m_struct`` the uncertainty
    structure row. ``tol`` is the strictness margin the assembled block must
    clear (as -lambda_max) before a solution is accepted.
    """

    a_nom: np.ndarray
    b_nom: np.ndarray
    n_a: np.ndarray
    n_b: np.ndarray
    m_struct: np.ndarray
    q_weight: np.ndarray
    r_weight: np.ndarray
    tol: float = 1e-7
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        self.a_nom = np.atleast_2d(np.asarray(self.a_nom, dtype=float))
        self.b_nom = np.atleast_2d(np.asarray(self.b_nom, dtype=float))
        self.n_a = np.atleast_2d(np.asarray(self.n_a, dtype=float))
        self.n_b = np.atleast_2d(np.asarray(self.n_b, dtype=float))
        self.m_struct = np.atleast_2d(np.asarray(self.m_struct, dtype=float))
        self.q_weight = np.atleast_2d(np.asarray(self.q_weight, dtype=float))
        self.r_weight = np.atleast_2d(np.asarray(self.r_weight, dtype=float))
        n, m = self.b_nom.shape
        if self.a_nom.shape != (n, n):
            raise ValueError("a_nom shape inconsistent with b_nom")
        r = self.n_a.shape[0]
        if self.n_a.shape[1] != n or self.n_b.shape != (r, m):
            raise ValueError("vertex stacks inconsistent with nominal dimensions")
        if self.m_struct.shape != (n, r):
            raise ValueError("m_struct shape must be (n, stack rows)")
        if self.q_weight.shape != (n, n) or self.r_weight.shape != (m, m):
            raise ValueError("weight shapes inconsistent")
        if self.tol <= 0.0:
            raise ValueError("strictness tolerance must be positive")
        if self.x0 is None:
            self.x0 = np.ones(n)
        else:
            self.x0 = np.asarray(self.x0, dtype=float).reshape(n)

    @property
    def n_states(self) -> int:
        return self.a_nom.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.b_nom.shape[1]


@dataclass
class SdpSolution:
    p: np.ndarray
    y: np.ndarray
    eps: float
    margin: float          # -lambda_max of the verified block
    feasible: bool = True
    flags: list[str] = field(default_factory=list)


def lmi_block(problem: SdpProblem, p: np.ndarray, y: np.ndarray, eps: float) -> np.ndarray:
    """Assemble the stabilization block matrix at a candidate (P, Y, eps).

    Plain numpy; used by the post-solve verification and by tests, never by
    the solver itself.
    """
    A, B = problem.a_nom, problem.b_nom
    Na, Nb, M = problem.n_a, problem.n_b, problem.m_struct
    n, m = problem.n_states, problem.n_inputs
    r = Na.shape[0]
    q_inv = np.linalg.inv(problem.q_weight)
    r_inv = np.linalg.inv(problem.r_weight)

    ap_by = A @ p + B @ y
    nap_nby = Na @ p + Nb @ y
    z = np.zeros
    return np.block([
        [-p + eps * (M @ M.T), ap_by,      z((n, r)),        z((n, n)), z((n, m))],
        [ap_by.T,              -p,         nap_nby.T,        p,         y.T],
        [z((r, n)),            nap_nby,    -eps * np.eye(r), z((r, n)), z((r, m))],
        [z((n, n)),            p,          z((n, r)),        -q_inv,   z((n, m))],
        [z((m, n)),            y,          z((m, r)),        z((m, n)), -r_inv],
    ])


def verify_lmi(problem: SdpProblem, p: np.ndarray, y: np.ndarray, eps: float) -> float:
    """Return the negative-definiteness margin (-lambda_max) of the block.

    Also requires P > 0 and eps > 0; returns -inf when those fail.
    """
    if eps <= 0.0 or np.any(np.linalg.eigvalsh(0.5 * (p + p.T)) <= 0.0):
        return -np.inf
    block = lmi_block(problem, p, y, eps)
    return float(-np.max(np.linalg.eigvalsh(0.5 * (block + block.T))))


def solve_lmi(problem: SdpProblem) -> SdpSolution:
    """Find (P, Y, eps) making the stabilization block negative definite.

    Minimizes the guaranteed-cost epigraph t >= x0' P^-1 x0 so that shrinking
    the uncertainty set never worsens the certified bound. Returns an
    infeasible solution object when no verified point is found within the
    solver budget.
    """
    import cvxpy as cp

    n, m = problem.n_states, problem.n_inputs
    r = problem.n_a.shape[0]
    A, B = problem.a_nom, problem.b_nom
    Na, Nb, M = problem.n_a, problem.n_b, problem.m_struct
    q_inv = np.linalg.inv(problem.q_weight)
    r_inv = np.linalg.inv(problem.r_weight)

    P = cp.Variable((n, n), symmetric=True)
    Y = cp.Variable((m, n))
    eps = cp.Variable(nonneg=True)
    t = cp.Variable()

    ap_by = A @ P + B @ Y
    nap_nby = Na @ P + Nb @ Y
    z = np.zeros
    block = cp.bmat([
        [-P + eps * (M @ M.T), ap_by,      z((n, r)),            z((n, n)), z((n, m))],
        [ap_by.T,              -P,         nap_nby.T,            P,         Y.T],
        [z((r, n)),            nap_nby,    -eps * np.eye(r),     z((r, n)), z((r, m))],
        [z((n, n)),            P,          z((n, r)),            -q_inv,   z((n, m))],
        [z((m, n)),            Y,          z((m, r)),            z((m, n)), -r_inv],
    ])
    dim = block.shape[0]
    x0 = problem.x0.reshape(-1, 1)
    cost_epigraph = cp.bmat([[cp.reshape(t, (1, 1), order="F"), x0.T],
                             [x0, P]])
    # solve with a margin above the acceptance tolerance so solver slack
    # cannot produce a block that fails the independent re-check
    constraints = [
        block << -10.0 * problem.tol * np.eye(dim),
        P >> 1e-9 * np.eye(n),
        eps >= 1e-12,
        cost_epigraph >> 0,
    ]
    prob = cp.Problem(cp.Minimize(t), constraints)
    solved = False
    for solver in (cp.CLARABEL, cp.SCS):
        try:
            prob.solve(solver=solver)
        except cp.error.SolverError:
            continue
        if prob.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) and P.value is not None:
            solved = True
            break
    if not solved:
        return SdpSolution(p=np.eye(n), y=np.zeros((m, n)), eps=0.0,
                           margin=-np.inf, feasible=False, flags=["solver"])

    p_val = 0.5 * (P.value + P.value.T)
    y_val = np.atleast_2d(Y.value)
    eps_val = float(eps.value)
    margin = verify_lmi(problem, p_val, y_val, eps_val)
    if margin < problem.tol:
        return SdpSolution(p=p_val, y=y_val, eps=eps_val, margin=margin,
                           feasible=False, flags=["verification"])
    return SdpSolution(p=p_val, y=y_val, eps=eps_val, margin=margin, feasible=True)


def spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(A)))))

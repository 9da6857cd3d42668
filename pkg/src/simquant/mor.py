"""Reduced-order models and their deviation bounds.

A projection P lifts the reduced state into the full space (x = P x_r); the
interface u = R u_r + Q x_r + K (x - P x_r) with the Sylvester-matching
feedforward Q makes the lifted reduced dynamics track the full ones. The
residual driving terms B_bar u_r and B_w_bar w_r act as a bounded disturbance
once the reduced noise is truncated to a box, at a quantified probability
cost, and the same invariance machinery as for grid abstractions certifies
an (epsilon, delta) pair. Stacked relations compose additively.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .coupling import radius_from_delta
from .models import Box, LtiModel
from .simrel import (
    FINITE_ABSTRACTION,
    MODEL_ORDER_REDUCTION,
    DEFAULT_LAMBDA_GRID,
    InfeasibleError,
    SimRelation,
    VerificationReport,
    _relation_from_values,
    _search_lambda,
    _verify_blocks,
)

SYLVESTER_TOL = 1e-8
OUTPUT_MATCH_TOL = 1e-10


@dataclass(frozen=True)
class ReducedModel:
    """Reduced dynamics plus the lift and interface matrices.

    Satisfies the Sylvester condition P A_r = A P + B Q and the output match
    C_r = C P against the full model it was built from.
    """

    A_r: np.ndarray
    B_r: np.ndarray
    B_rw: np.ndarray
    C_r: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    @property
    def n_r(self) -> int:
        return self.A_r.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.B_rw.shape[1]


def build_reduced(model: LtiModel, P, A_r, B_r, B_rw, R) -> ReducedModel:
    """Complete a candidate reduction by solving for the feedforward gain.

    Q is the least-squares solution of B Q = P A_r - A P; the construction
    fails when the residual exceeds the Sylvester tolerance or P is rank
    deficient. The reduced output matrix is C P.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    A_r = np.atleast_2d(np.asarray(A_r, dtype=float))
    B_r = np.atleast_2d(np.asarray(B_r, dtype=float))
    B_rw = np.atleast_2d(np.asarray(B_rw, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n_r = A_r.shape[0]
    if P.shape != (model.n, n_r):
        raise ValueError(f"P must be {model.n}x{n_r}, got {P.shape}")
    if n_r > model.n:
        raise ValueError("the reduced order cannot exceed the full order")
    if np.linalg.matrix_rank(P) < n_r:
        raise ValueError("P must have full column rank")
    rhs = P @ A_r - model.A @ P
    Q, *_ = np.linalg.lstsq(model.B, rhs, rcond=None)
    residual = float(np.linalg.norm(model.B @ Q - rhs))
    if residual > SYLVESTER_TOL:
        raise ValueError(
            f"Sylvester equation P A_r = A P + B Q is inconsistent "
            f"(residual {residual:.3e} > {SYLVESTER_TOL})"
        )
    return ReducedModel(A_r=A_r, B_r=B_r, B_rw=B_rw, C_r=model.C @ P, P=P, Q=Q, R=R)


def delta_trunc_of(radius: float, d: int) -> float:
    """Probability that a d-dimensional standard normal leaves the radius box."""
    if radius < 0:
        raise ValueError("truncation radius must be nonnegative")
    return float(1.0 - (2.0 * ndtr(radius) - 1.0) ** d)


def truncation_radius(delta_trunc: float, d: int) -> float:
    """Per-axis box radius whose escape probability equals delta_trunc."""
    if not 0.0 < delta_trunc < 1.0:
        raise ValueError("delta_trunc must lie in (0, 1)")
    inner = (1.0 - delta_trunc) ** (1.0 / d)
    return float(ndtri((1.0 + inner) / 2.0))


@dataclass
class MorErrorSystem:
    """Error dynamics of the lifted reduced model against the full one.

    x_delta+ = A_bar x_delta + B_w gamma + z with z ranging over the Minkowski
    sum of the residual input and truncated-noise images; the candidate
    vertex list contains all pairwise sums of image vertices.
    """

    K: np.ndarray
    A_bar: np.ndarray
    B_bar: np.ndarray
    B_w_bar: np.ndarray
    Z_vertices: np.ndarray
    W_box: Box | None
    delta_trunc: float


def build_error_system(model: LtiModel, reduced: ReducedModel, K=None,
                       w_radius: float = 0.0) -> MorErrorSystem:
    K = np.zeros((model.m, model.n)) if K is None else np.atleast_2d(np.asarray(K, dtype=float))
    B_bar = model.B @ reduced.R - reduced.P @ reduced.B_r
    B_w_bar = model.B_w - reduced.P @ reduced.B_rw
    d = reduced.noise_dim

    z_parts = []
    if np.abs(B_bar).max(initial=0.0) > 1e-12:
        z_parts.append(model.input_box.vertices() @ B_bar.T)
    w_box = None
    if np.abs(B_w_bar).max(initial=0.0) > 1e-12:
        if w_radius <= 0.0:
            raise InfeasibleError(
                "the reduced noise does not cancel (B_w != P B_rw); a positive "
                "truncation budget is required"
            )
        w_box = Box(-w_radius * np.ones(d), w_radius * np.ones(d))
        z_parts.append(w_box.vertices() @ B_w_bar.T)
    if not z_parts:
        z_vertices = np.zeros((1, model.n))
    elif len(z_parts) == 1:
        z_vertices = z_parts[0]
    else:
        z_vertices = (z_parts[0][:, None, :] + z_parts[1][None, :, :]).reshape(-1, model.n)
    z_vertices = np.unique(np.round(z_vertices, 14), axis=0)

    delta_trunc = delta_trunc_of(w_radius, d) if w_box is not None else 0.0
    return MorErrorSystem(
        K=K,
        A_bar=model.A + model.B @ K,
        B_bar=B_bar,
        B_w_bar=B_w_bar,
        Z_vertices=z_vertices,
        W_box=w_box,
        delta_trunc=delta_trunc,
    )


def optimize_epsilon_mor(
    model: LtiModel,
    reduced: ReducedModel,
    delta_budget: float,
    trunc_split: float = 0.5,
    lam_grid=None,
    input_margin: float = 0.0,
) -> SimRelation:
    """Minimize the lifted output deviation for a total probability budget.

    The budget splits into a truncation part (sizing the reduced-noise box)
    and a coupling part (sizing the shift radius). The invariance SDP gains
    one block per candidate Z-vertex and, when ``input_margin`` is positive,
    a bound on the interface feedback K keeping its correction inside the
    margin. Returns a model-order-reduction relation carrying K and the
    truncation data.
    """
    if not 0.0 <= delta_budget < 1.0:
        raise ValueError("delta budget must lie in [0, 1)")
    if not 0.0 < trunc_split < 1.0:
        raise ValueError("trunc_split must lie in (0, 1)")
    lam_grid = DEFAULT_LAMBDA_GRID if lam_grid is None else list(lam_grid)
    if not lam_grid:
        raise ValueError("lambda grid must be nonempty")

    B_w_bar = model.B_w - reduced.P @ reduced.B_rw
    needs_truncation = np.abs(B_w_bar).max(initial=0.0) > 1e-12
    if needs_truncation:
        delta_trunc = trunc_split * delta_budget
        if delta_trunc <= 0.0:
            raise InfeasibleError("residual reduced noise requires a positive delta budget")
        w_radius = truncation_radius(delta_trunc, reduced.noise_dim)
    else:
        delta_trunc = 0.0
        w_radius = 0.0
    delta_coupling = (1.0 - trunc_split) * delta_budget
    r = radius_from_delta(delta_coupling)

    err = build_error_system(model, reduced, K=None, w_radius=w_radius)
    vertices = list(err.Z_vertices)
    candidates, statuses = _search_lambda(
        model.A, model.B_w, model.C, vertices, r, lam_grid,
        B=model.B, input_margin=input_margin,
    )
    if not candidates:
        raise InfeasibleError(
            f"no feasible reduced-order certificate for budget={delta_budget} "
            f"(solver statuses: {sorted(s for s in statuses if s)})"
        )
    last_report = None
    for epsilon, lam, values in candidates:
        rel = _relation_from_values(
            delta_coupling + delta_trunc, lam, values, model.noise_dim, model.n,
            kind=MODEL_ORDER_REDUCTION, w_radius=w_radius, delta_trunc=delta_trunc,
            with_k=True,
        )
        report = verify_relation_mor(model, reduced, rel, input_margin=input_margin)
        if report.passed:
            return rel
        last_report = report
    raise InfeasibleError(
        "all feasible reduced-order solver outputs failed verification; "
        f"worst margin {last_report.worst_margin:.3e}"
    )


def verify_relation_mor(model: LtiModel, reduced: ReducedModel, rel: SimRelation,
                        input_margin: float = 0.0, tol: float = 1e-8) -> VerificationReport:
    """Certificate margins for a model-order-reduction relation."""
    report = VerificationReport(tol=tol)
    err = build_error_system(model, reduced, K=rel.K, w_radius=rel.w_radius)
    _verify_blocks(
        model.A, model.B_w, model.C, list(err.Z_vertices), rel, rel.radius, report,
        B=model.B, input_margin=input_margin if input_margin > 0 else None,
    )
    return report


def compose_transitive(rel1: SimRelation, rel2: SimRelation) -> tuple[float, float]:
    """Total deviation pair of two stacked simulation relations.

    ``rel1`` relates the finite abstraction to the reduced model and ``rel2``
    the reduced model to the full one; deviations add, probabilities add and
    clamp at one.
    """
    if rel1.kind != FINITE_ABSTRACTION:
        raise ValueError(f"first relation must be a finite-abstraction one, got {rel1.kind!r}")
    if rel2.kind != MODEL_ORDER_REDUCTION:
        raise ValueError(f"second relation must be a model-order-reduction one, got {rel2.kind!r}")
    return rel1.epsilon + rel2.epsilon, min(1.0, rel1.delta + rel2.delta)


def load_reduced(path, model: LtiModel):
    """Read a reduced-model JSON and complete it against the full model.

    Returns the reduced model together with the MOR options block (reduced
    state box, grid, budget split) used by the command-line pipeline.
    """
    with open(path) as fh:
        data = json.load(fh)
    try:
        reduced = build_reduced(
            model,
            P=np.array(data["P"], dtype=float),
            A_r=np.array(data["Ar"], dtype=float),
            B_r=np.array(data["Br"], dtype=float),
            B_rw=np.array(data["Brw"], dtype=float),
            R=np.array(data["R"], dtype=float),
        )
    except KeyError as exc:
        raise ValueError(f"reduced-model file {path} is missing key {exc}") from exc
    options = {k: data[k] for k in ("state_box", "grid", "delta_r", "trunc_split", "input_margin")
               if k in data}
    return reduced, options

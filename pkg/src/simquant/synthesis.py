"""Robust dynamic programming and controller refinement.

Value iteration runs on the product of the finite MDP and the specification
DFA with two robustness penalties: ambiguous state labels are resolved
adversarially, and the per-step probability deviation delta is subtracted
before clamping to [0, 1]. The fixed point lower-bounds the satisfaction
probability the refined controller achieves on the concrete system, which is
checked empirically by coupled Monte-Carlo simulation.
"""

from dataclasses import dataclass

import numpy as np

from .coupling import sample_maximal_coupling_batch, _couple_batch_given_first
from .models import GridAbstraction, project_batch
from .simrel import SimRelation
from .specs import Dfa, RobustLabeling, membership_batch


@dataclass
class ValueTable:
    """Fixed point of the robust Bellman operator on (abstract state, DFA state)."""

    values: np.ndarray
    q_states: tuple
    iterations: int
    residual: float

    def value(self, state_idx: int, q) -> float:
        return float(self.values[state_idx, self.q_states.index(q)])


@dataclass
class AbstractPolicy:
    """Input choice per (abstract state, DFA state), as indices into the input set."""

    choice: np.ndarray
    q_states: tuple
    input_samples: np.ndarray

    def input_for(self, state_idx: int, q) -> np.ndarray:
        return self.input_samples[self.choice[state_idx, self.q_states.index(q)]]


def _state_letter_ids(dfa: Dfa, labeling: RobustLabeling):
    """Per-state achievable letter ids, grouped by identical letter tuples."""
    ids = [tuple(sorted({dfa.letter_id(letter) for letter in letters}))
           for letters in labeling.letters]
    groups = {}
    for state, key in enumerate(ids):
        groups.setdefault(key, []).append(state)
    return ids, {key: np.array(states, dtype=np.intp) for key, states in groups.items()}


def robust_value_iteration(
    kernel: np.ndarray,
    dfa: Dfa,
    labeling: RobustLabeling,
    delta: float,
    tol: float = 1e-6,
    max_iters: int = 10_000,
):
    """Iterate the robust Bellman operator to its fixed point.

    V_{k+1}(x, q) = max_u clamp01( sum_x' T(x'|x,u) * min_{letter of x'}
    V_k(x', step(q, letter)) - delta ), with V pinned to 1 on accepting DFA
    states and to 0 at the sink for non-accepting ones. Returns the value
    table and the argmax policy (ties resolved to the lowest input index).
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    n_cells, n_inputs, n_states = kernel.shape
    if n_states != n_cells + 1:
        raise ValueError("kernel must have one probability column per cell plus the sink")
    if labeling.n_states != n_states:
        raise ValueError("labeling must cover every cell plus the sink")

    q_index, trans, accepting = dfa.tables()
    n_q = len(dfa.states)
    _, letter_groups = _state_letter_ids(dfa, labeling)
    kernel_flat = kernel.reshape(n_cells * n_inputs, n_states)

    V = np.zeros((n_states, n_q))
    V[:, accepting] = 1.0
    policy = np.zeros((n_states, n_q), dtype=np.intp)
    non_accepting = np.flatnonzero(~accepting)

    iterations = 0
    residual = np.inf
    worst = np.empty(n_states)
    while iterations < max_iters and residual >= tol:
        iterations += 1
        V_new = V.copy()
        for qi in non_accepting:
            for lids, states in letter_groups.items():
                successors = trans[qi, list(lids)]
                worst[states] = V[np.ix_(states, successors)].min(axis=1)
            q_values = (kernel_flat @ worst).reshape(n_cells, n_inputs) - delta
            policy[:n_cells, qi] = np.argmax(q_values, axis=1)
            V_new[:n_cells, qi] = np.clip(q_values.max(axis=1), 0.0, 1.0)
        residual = float(np.abs(V_new - V).max())
        V = V_new

    table = ValueTable(values=V, q_states=tuple(dfa.states), iterations=iterations,
                       residual=residual)
    return table, AbstractPolicy(choice=policy, q_states=tuple(dfa.states),
                                 input_samples=None)


def satisfaction_bounds(table: ValueTable, labeling: RobustLabeling, dfa: Dfa) -> np.ndarray:
    """Guaranteed satisfaction probability from each cell's representative.

    The bound at a cell is the value after consuming the worst achievable
    initial letter from the DFA's initial state.
    """
    q_index, trans, _ = dfa.tables()
    q0 = q_index[dfa.initial]
    n_cells = table.values.shape[0] - 1
    bounds = np.empty(n_cells)
    for i in range(n_cells):
        ids = sorted({dfa.letter_id(letter) for letter in labeling.letters[i]})
        bounds[i] = table.values[i, trans[q0, ids]].min()
    return bounds


class RefinedController:
    """Concrete-loop controller refined from an abstract policy and certificate.

    Keeps an internal abstract state and DFA state; on observing the concrete
    state it replays the abstract input (interface u := u_hat), draws the
    concrete and abstract noise jointly from the maximal coupling shifted by
    F (x - x_hat), and advances its abstract copy with the abstract half of
    the pair. Relation breaches are counted and repaired by re-projection.
    """

    def __init__(self, policy: AbstractPolicy, rel: SimRelation,
                 abstraction: GridAbstraction, dfa: Dfa, propositions, rng):
        self.policy = policy
        self.rel = rel
        self.abstraction = abstraction
        self.dfa = dfa
        self.propositions = propositions
        self.rng = rng
        model = abstraction.model
        self._q_index, self._trans, self._accepting = dfa.tables()
        self._A, self._B, self._B_w = model.A, model.B, model.B_w
        self._C = model.C
        self._q0 = self._q_index[dfa.initial]
        self.state_idx = None

    def _abstract_letter_ids(self, state_idx: np.ndarray) -> np.ndarray:
        reps = self.abstraction.representatives
        n_cells = reps.shape[0]
        ids = np.zeros(state_idx.shape, dtype=np.intp)
        in_domain = state_idx < n_cells
        if in_domain.any():
            Y = reps[state_idx[in_domain]] @ self._C.T
            for j, name in enumerate(self.dfa.props):
                prop = next(p for p in self.propositions if p.name == name)
                ids[in_domain] += (1 << j) * membership_batch(prop, Y)
        return ids

    def reset_batch(self, x0, n_runs: int):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        self.X_hat = np.tile(x0, (n_runs, 1))
        idx = project_batch(self.abstraction, self.X_hat)
        if (idx == self.abstraction.sink_index).any():
            raise ValueError("initial state lies outside the abstraction domain")
        self.state_idx = idx
        self.X_hat = self.abstraction.representatives[idx]
        self.q_idx = self._trans[self._q0, self._abstract_letter_ids(idx)]
        self.delta_events = np.zeros(n_runs, dtype=int)

    def reset(self, x0):
        self.reset_batch(x0, 1)

    def step_batch(self, X: np.ndarray):
        """Advance all runs one step; returns the inputs and the concrete noise."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = self.policy.input_samples[self.policy.choice[self.state_idx, self.q_idx]]
        gamma = (X - self.X_hat) @ self.rel.F.T
        W_hat, W = sample_maximal_coupling_batch(gamma, self.rng)
        hat_next = self.X_hat @ self._A.T + U @ self._B.T + W_hat @ self._B_w.T
        idx = project_batch(self.abstraction, hat_next)
        X_next = X @ self._A.T + U @ self._B.T + W @ self._B_w.T

        sink = idx == self.abstraction.sink_index
        if sink.any():
            # abstract copy left the domain: relation void, counted as a
            # breach; re-project onto the concrete state (clipped to the box
            # when the concrete state is also outside)
            self.delta_events[sink] += 1
            repair = project_batch(self.abstraction, X_next[sink])
            inside = repair != self.abstraction.sink_index
            fixed = idx[sink]
            fixed[inside] = repair[inside]
            clipped = np.clip(
                X_next[sink],
                self.abstraction.model.state_box.lo,
                self.abstraction.model.state_box.hi,
            )
            fixed[~inside] = project_batch(self.abstraction, clipped[~inside])
            idx[sink] = fixed
        X_hat_next = self.abstraction.representatives[idx]

        dev = X_next - X_hat_next
        breach = np.einsum("ij,jk,ik->i", dev, self.rel.D, dev) > self.rel.epsilon**2 * (1 + 1e-12)
        breach &= ~sink
        if breach.any():
            self.delta_events[breach] += 1
            repair = project_batch(self.abstraction, X_next[breach])
            inside = repair != self.abstraction.sink_index
            fixed = idx[breach]
            fixed[inside] = repair[inside]
            idx[breach] = fixed
            X_hat_next = self.abstraction.representatives[idx]

        self.state_idx = idx
        self.X_hat = X_hat_next
        self.q_idx = self._trans[self.q_idx, self._abstract_letter_ids(idx)]
        return U, W

    def step(self, x):
        U, W = self.step_batch(np.atleast_1d(np.asarray(x, dtype=float))[None, :])
        return U[0], W[0]

    @property
    def x_hat(self):
        return self.X_hat[0]

    @property
    def q(self):
        return self.dfa.states[self.q_idx[0]]


def refine_controller(policy: AbstractPolicy, rel: SimRelation,
                      abstraction: GridAbstraction, dfa: Dfa, propositions,
                      rng) -> RefinedController:
    """Build the stateful concrete-loop controller from synthesis artifacts."""
    if policy.input_samples is None:
        policy = AbstractPolicy(policy.choice, policy.q_states, abstraction.input_samples)
    return RefinedController(policy, rel, abstraction, dfa, propositions, rng)


@dataclass
class ValidationResult:
    """Empirical satisfaction frequency with a Wilson 95 percent interval."""

    frequency: float
    wilson_low: float
    wilson_high: float
    n_runs: int
    n_accepted: int
    delta_event_fraction: float = 0.0


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054):
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("interval needs at least one trial")
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def _concrete_letter_ids(dfa: Dfa, propositions, Y: np.ndarray) -> np.ndarray:
    ids = np.zeros(Y.shape[0], dtype=np.intp)
    for j, name in enumerate(dfa.props):
        prop = next(p for p in propositions if p.name == name)
        ids += (1 << j) * membership_batch(prop, Y)
    return ids


def monte_carlo_validate(model, controller, dfa: Dfa, propositions, x0,
                         n_runs: int, horizon: int, rng=None) -> ValidationResult:
    """Estimate the concrete closed-loop satisfaction frequency from one start.

    Simulates ``n_runs`` coupled runs of the composed system, feeds the
    concrete output word to the DFA, and stops runs early once every DFA copy
    is absorbed. Acceptance anywhere within the horizon counts (co-safe
    semantics); unresolved runs count as failures, keeping the check
    one-sided.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if rng is not None:
        controller.rng = rng
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    q_index, trans, accepting = dfa.tables()

    # a DFA state is settled once no letter can leave it
    absorbing = np.array([
        all(trans[qi, lid] == qi for lid in range(trans.shape[1]))
        for qi in range(len(dfa.states))
    ])

    controller.reset_batch(x0, n_runs)
    X = np.tile(x0, (n_runs, 1))
    q = np.full(n_runs, q_index[dfa.initial], dtype=np.intp)
    q = trans[q, _concrete_letter_ids(dfa, propositions, X @ model.C.T)]
    accepted = accepting[q]

    for _ in range(horizon):
        if (accepted | absorbing[q]).all():
            break
        U, W = controller.step_batch(X)
        X = X @ model.A.T + U @ model.B.T + W @ model.B_w.T
        q = trans[q, _concrete_letter_ids(dfa, propositions, X @ model.C.T)]
        accepted |= accepting[q]

    n_accepted = int(accepted.sum())
    low, high = wilson_interval(n_accepted, n_runs)
    return ValidationResult(
        frequency=n_accepted / n_runs,
        wilson_low=low,
        wilson_high=high,
        n_runs=n_runs,
        n_accepted=n_accepted,
        delta_event_fraction=float((controller.delta_events > 0).mean()),
    )


class MorRefinedController:
    """Controller refined through a reduced-order model and its abstraction.

    Chains two coupled noise pairs: the abstract/reduced pair from the grid
    relation and, conditioned on the reduced noise, the concrete noise from
    the reduction relation. The concrete input follows the interface
    u = R u_r + Q x_r + K (x - P x_r).
    """

    def __init__(self, policy: AbstractPolicy, rel_abs: SimRelation, rel_mor: SimRelation,
                 abstraction: GridAbstraction, reduced, model, dfa: Dfa, propositions, rng):
        if policy.input_samples is None:
            policy = AbstractPolicy(policy.choice, policy.q_states, abstraction.input_samples)
        self.policy = policy
        self.rel_abs = rel_abs
        self.rel_mor = rel_mor
        self.abstraction = abstraction
        self.reduced = reduced
        self.model = model
        self.dfa = dfa
        self.propositions = propositions
        self.rng = rng
        self._q_index, self._trans, self._accepting = dfa.tables()
        self._q0 = self._q_index[dfa.initial]
        self._K = rel_mor.K if rel_mor.K is not None else np.zeros((model.m, model.n))
        self._helper = RefinedController(policy, rel_abs, abstraction, dfa, propositions, rng)

    def reset_batch(self, x0, n_runs: int):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        # lift-consistent start: x_r solves x0 = P x_r in least squares
        xr0, *_ = np.linalg.lstsq(self.reduced.P, x0, rcond=None)
        self.X_r = np.tile(xr0, (n_runs, 1))
        self._helper.rng = self.rng
        self._helper.reset_batch(xr0, n_runs)
        self.delta_events = np.zeros(n_runs, dtype=int)

    def step_batch(self, X: np.ndarray):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        red = self.reduced
        helper = self._helper

        U_r = helper.policy.input_samples[helper.policy.choice[helper.state_idx, helper.q_idx]]
        # abstract/reduced coupling, then concrete noise conditioned on w_r
        gamma_abs = (self.X_r - helper.X_hat) @ self.rel_abs.F.T
        W_hat, W_r = sample_maximal_coupling_batch(gamma_abs, self.rng)

        dev = X - self.X_r @ red.P.T
        gamma_r = dev @ self.rel_mor.F.T
        W = _couple_batch_given_first(W_r + gamma_r, gamma_r, self.rng)

        U = U_r @ red.R.T + self.X_r @ red.Q.T + dev @ self._K.T

        hat_next = helper.X_hat @ red.A_r.T + U_r @ red.B_r.T + W_hat @ red.B_rw.T
        idx = project_batch(self.abstraction, hat_next)
        X_r_next = self.X_r @ red.A_r.T + U_r @ red.B_r.T + W_r @ red.B_rw.T
        X_next = X @ self.model.A.T + U @ self.model.B.T + W @ self.model.B_w.T

        sink = idx == self.abstraction.sink_index
        if sink.any():
            self.delta_events[sink] += 1
            repair = project_batch(self.abstraction, X_r_next[sink])
            inside = repair != self.abstraction.sink_index
            fixed = idx[sink]
            fixed[inside] = repair[inside]
            clipped = np.clip(X_r_next[sink], self.abstraction.model.state_box.lo,
                              self.abstraction.model.state_box.hi)
            fixed[~inside] = project_batch(self.abstraction, clipped[~inside])
            idx[sink] = fixed
        X_hat_next = self.abstraction.representatives[idx]

        dev_abs = X_r_next - X_hat_next
        breach = np.einsum("ij,jk,ik->i", dev_abs, self.rel_abs.D, dev_abs) \
            > self.rel_abs.epsilon**2 * (1 + 1e-12)
        breach &= ~sink
        dev_mor = X_next - X_r_next @ red.P.T
        breach |= np.einsum("ij,jk,ik->i", dev_mor, self.rel_mor.D, dev_mor) \
            > self.rel_mor.epsilon**2 * (1 + 1e-12)
        if breach.any():
            self.delta_events[breach] += 1
            repair = project_batch(self.abstraction, X_r_next[breach])
            inside = repair != self.abstraction.sink_index
            fixed = idx[breach]
            fixed[inside] = repair[inside]
            idx[breach] = fixed
            X_hat_next = self.abstraction.representatives[idx]

        helper.state_idx = idx
        helper.X_hat = X_hat_next
        helper.q_idx = self._trans[helper.q_idx, helper._abstract_letter_ids(idx)]
        self.X_r = X_r_next
        return U, W

    def step(self, x):
        U, W = self.step_batch(np.atleast_1d(np.asarray(x, dtype=float))[None, :])
        return U[0], W[0]

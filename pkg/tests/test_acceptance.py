"""Acceptance suite: one test per release criterion, printed pass by pass.

Each criterion runs at its stated tolerance and time budget. Expected values
marked as study figures were cross-checked against quadrature/bisection
oracles in the unit suites; brute-force enumerations here are written
independently of the production code paths they check.
"""

import itertools
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import sample_ellipsoid_boundary

from simquant.cli import EXIT_OK, main
from simquant.coupling import delta_from_gamma, sample_maximal_coupling_batch
from simquant.models import Box, GridSpec, LtiModel, build_grid, load_model
from simquant.mor import build_error_system, build_reduced, compose_transitive, \
    optimize_epsilon_mor
from simquant.simrel import FINITE_ABSTRACTION, MODEL_ORDER_REDUCTION, SimRelation, \
    optimize_epsilon, scalar_oracle, verify_relation
from simquant.specs import EMPTY_LETTER, Letter, RobustLabeling, robust_labels, \
    template_bounded_invariance
from simquant.synthesis import monte_carlo_validate, refine_controller, \
    robust_value_iteration

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def report(criterion: str):
    print(f"\nACCEPTANCE {criterion}: PASS")


def read_frontier(path: Path) -> dict:
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
    return {float(r["delta"]): r for r in rows}


@pytest.fixture(scope="module")
def quantify_1d(tmp_path_factory):
    out = tmp_path_factory.mktemp("frontier1d")
    start = time.perf_counter()
    code = main([
        "quantify", "--model", str(CONFIGS / "parking1d.json"),
        "--delta", "0", "--delta", "0.012", "--delta", "0.018",
        "--out", str(out),
    ])
    elapsed = time.perf_counter() - start
    assert code == EXIT_OK
    return out, elapsed


@pytest.fixture(scope="module")
def quantify_2d(tmp_path_factory):
    out = tmp_path_factory.mktemp("frontier2d")
    start = time.perf_counter()
    code = main([
        "quantify", "--model", str(CONFIGS / "parking2d.json"),
        "--delta", "0", "--delta", "0.016", "--delta", "0.051",
        "--out", str(out),
    ])
    elapsed = time.perf_counter() - start
    assert code == EXIT_OK
    return out, elapsed


@pytest.fixture(scope="module")
def scalar_panel():
    """20 random scalar systems inside the oracle's validity regime."""
    rng = np.random.default_rng(2024)
    panel = []
    while len(panel) < 20:
        a = rng.uniform(0.3, 0.95) * rng.choice([-1.0, 1.0])
        b_w = rng.uniform(0.5, 1.5)
        beta_max = rng.uniform(0.05, 0.2)
        r_cap = min(0.15, abs(a) * beta_max / b_w)
        r = rng.uniform(0.0, r_cap)
        model = LtiModel(
            A=[[a]], B=[[1.0]], B_w=[[b_w]], C=[[1.0]],
            state_box=Box([-10 * beta_max], [10 * beta_max]),
            input_box=Box([-1.0], [1.0]),
        )
        abstraction = build_grid(model, GridSpec((10,), [[0.0]]), build_kernel=False)
        rel = optimize_epsilon(model, abstraction, delta_from_gamma(np.array([r])))
        panel.append((a, b_w, beta_max, r, model, abstraction, rel))
    return panel


def test_criterion_1_coupling_law():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    n = 100_000
    for norm in (0.0, 0.5, 1.0, 2.0):
        gamma = np.zeros(2)
        gamma[0] = norm
        w_hat, w = sample_maximal_coupling_batch(np.tile(gamma, (n, 1)), rng)
        hits = np.all(w - w_hat == gamma, axis=1).mean()
        expected = 1.0 - delta_from_gamma(gamma)
        assert abs(hits - expected) <= 0.005, (norm, hits, expected)
        from scipy.stats import kstest

        crit = 1.63 / np.sqrt(n)  # 1% KS critical value
        for column in (w_hat[:, 0], w_hat[:, 1], w[:, 0], w[:, 1]):
            assert kstest(column, "norm").statistic < crit
    assert time.perf_counter() - start < 10.0
    report("1 coupling law")


def test_criterion_2_parking_1d_frontier(quantify_1d):
    out, elapsed = quantify_1d
    rows = read_frontier(out / "frontier.csv")
    expected = {0.0: 0.5, 0.012: 0.2, 0.018: 0.05}
    for delta, target in expected.items():
        assert rows[delta]["status"] == "ok"
        assert float(rows[delta]["epsilon"]) == pytest.approx(target, rel=0.10)
    closed_form = scalar_oracle(0.9, 1.0, 0.05, 0.0)
    assert float(rows[0.0]["epsilon"]) == pytest.approx(closed_form, rel=0.02)
    assert elapsed < 60.0
    report("2 one-dimensional parking frontier")


def test_criterion_3_parking_2d_frontier(quantify_2d):
    out, elapsed = quantify_2d
    rows = read_frontier(out / "frontier.csv")
    expected = {0.0: 1.414, 0.016: 1.005, 0.051: 0.141}
    for delta, target in expected.items():
        assert rows[delta]["status"] == "ok"
        assert float(rows[delta]["epsilon"]) == pytest.approx(target, rel=0.10)
    assert float(rows[0.0]["epsilon"]) == pytest.approx(np.sqrt(2) * 0.1 / 0.1, rel=0.02)
    assert elapsed < 300.0
    report("3 two-dimensional parking frontier")


def test_criterion_4_scalar_oracle_agreement(scalar_panel):
    for a, b_w, beta_max, r, _, _, rel in scalar_panel:
        expected = scalar_oracle(a, b_w, beta_max, r)
        assert rel.epsilon == pytest.approx(expected, rel=0.03), (a, b_w, beta_max, r)
    report("4 scalar oracle agreement")


def test_criterion_5_certificate_soundness(quantify_1d, quantify_2d, scalar_panel):
    rng = np.random.default_rng(55)
    for config, run in (("parking1d.json", quantify_1d), ("parking2d.json", quantify_2d)):
        model, grid = load_model(CONFIGS / config)
        abstraction = build_grid(model, grid, build_kernel=False)
        for idx in range(3):
            rel = SimRelation.load(run[0] / f"relation_{idx}.json")
            rep = verify_relation(model, abstraction.beta_vertices, rel)
            assert rep.passed and rep.worst_margin >= -1e-8, rep.as_dict()
            # random boundary points: invariance, output, and shift budget
            X = sample_ellipsoid_boundary(rng, rel.D, rel.epsilon, 10_000)
            betas = abstraction.beta_vertices[
                rng.integers(0, len(abstraction.beta_vertices), size=10_000)
            ]
            succ = X @ (model.A + model.B_w @ rel.F).T - betas
            quad = np.einsum("ij,jk,ik->i", succ, rel.D, succ)
            assert (quad <= rel.epsilon**2 * (1 + 1e-6)).all()
            assert (
                np.linalg.norm(X @ model.C.T, axis=1) <= rel.epsilon * (1 + 1e-6)
            ).all()
            assert (
                np.linalg.norm(X @ rel.F.T, axis=1) <= rel.radius * (1 + 1e-6)
            ).all()
    for a, b_w, beta_max, r, model, abstraction, rel in scalar_panel:
        rep = verify_relation(model, abstraction.beta_vertices, rel)
        assert rep.passed and rep.worst_margin >= -1e-8
    report("5 certificate soundness")


def test_criterion_6_synthesis_soundness(synthesis_1d):
    start = time.perf_counter()
    bundle = synthesis_1d
    rel = bundle["rel"]
    assert rel.epsilon == pytest.approx(0.2, rel=0.10)
    assert rel.delta == 0.012
    abstraction = bundle["abstraction"]
    cells = np.unique(np.linspace(0, abstraction.n_cells - 1, 20).astype(int))
    assert len(cells) == 20
    for cell in cells:
        controller = refine_controller(
            bundle["policy"], rel, abstraction, bundle["dfa"],
            bundle["propositions"], np.random.default_rng([606, int(cell)]),
        )
        result = monte_carlo_validate(
            bundle["model"], controller, bundle["dfa"], bundle["propositions"],
            abstraction.representatives[cell], n_runs=10_000, horizon=100,
        )
        half_width = 0.5 * (result.wilson_high - result.wilson_low)
        bound = bundle["bounds"][cell]
        assert result.frequency >= bound - half_width, (
            cell, abstraction.representatives[cell], bound, result.frequency
        )
    assert time.perf_counter() - start < 600.0
    report("6 synthesis soundness")


def test_criterion_7_transitivity_and_reduction():
    def rel_of(eps, delta, kind):
        return SimRelation(epsilon=eps, delta=delta, D=np.eye(1),
                           F=np.zeros((1, 1)), lam=0.5, kind=kind)

    # reported building-study pairs compose additively, exactly
    eps, delta = compose_transitive(
        rel_of(0.1087, 0.0, FINITE_ABSTRACTION),
        rel_of(0.2413, 0.0161, MODEL_ORDER_REDUCTION),
    )
    assert eps == 0.1087 + 0.2413
    assert abs(eps - 0.35) < 1e-15
    assert delta == 0.0161

    # identity-reduction degeneracy: lifting through P = I adds no error
    model = LtiModel(A=[[0.9]], B=[[0.5]], B_w=[[1.0]], C=[[1.0]],
                     state_box=Box([-10.0], [10.0]), input_box=Box([-1.0], [1.0]))
    reduced = build_reduced(model, P=np.eye(1), A_r=model.A, B_r=model.B,
                            B_rw=model.B_w, R=np.eye(1))
    rel_mor = optimize_epsilon_mor(model, reduced, delta_budget=0.01,
                                   lam_grid=tuple(np.arange(0.05, 1.0, 0.05)))
    assert rel_mor.epsilon <= 1e-6
    assert rel_mor.delta_trunc == 0.0

    # boundary invariance of the reduced-order error recursion at 1e-6
    model2 = LtiModel(A=0.9 * np.eye(2), B=0.7 * np.eye(2), B_w=np.eye(2), C=np.eye(2),
                      state_box=Box([-2.0, -8.0], [10.0, 5.0]),
                      input_box=Box([-1.0, -1.0], [1.0, 1.0]))
    reduced2 = build_reduced(
        model2, P=np.array([[1.0], [0.0]]), A_r=np.array([[0.9]]),
        B_r=np.array([[0.7, 0.0]]), B_rw=np.array([[1.0, 0.0]]),
        R=np.array([[1.0, 0.0], [0.0, 0.0]]),
    )
    rel2 = optimize_epsilon_mor(model2, reduced2, delta_budget=0.02,
                                lam_grid=tuple(np.arange(0.05, 1.0, 0.05)))
    err = build_error_system(model2, reduced2, K=rel2.K, w_radius=rel2.w_radius)
    rng = np.random.default_rng(77)
    X = sample_ellipsoid_boundary(rng, rel2.D, rel2.epsilon, 10_000)
    U_r = model2.input_box.sample(rng, 10_000)
    W_r = err.W_box.sample(rng, 10_000)
    succ = (X @ err.A_bar.T + U_r @ err.B_bar.T + (X @ rel2.F.T) @ model2.B_w.T
            + W_r @ err.B_w_bar.T)
    quad = np.einsum("ij,jk,ik->i", succ, rel2.D, succ)
    assert (quad <= rel2.epsilon**2 * (1 + 1e-6)).all()
    report("7 transitivity and reduced-order path")


def _brute_force_value(kernel, dfa, state_letters, x0, q0_effective, horizon):
    """Exhaustive enumeration of stationary product policies and all paths."""
    n_cells, n_inputs, n_states = kernel.shape
    q_index, trans, accepting = dfa.tables()
    letter_ids = [dfa.letter_id(letter) for letter in state_letters]

    def value_under(policy, state, q, depth):
        # expected acceptance mass; q has already consumed the state's letter
        if accepting[q]:
            return 1.0
        if depth == horizon or state == n_cells:
            return 0.0
        u = policy[(state, q)]
        total = 0.0
        for succ in range(n_states):
            p = kernel[state, u, succ]
            if p > 0.0:
                q_next = trans[q, letter_ids[succ]]
                total += p * value_under(policy, succ, q_next, depth + 1)
        return total

    slots = [(s, q) for s in range(n_cells) for q in range(len(dfa.states))
             if not accepting[q]]
    best = 0.0
    for choice in itertools.product(range(n_inputs), repeat=len(slots)):
        policy = dict(zip(slots, choice))
        for s in range(n_cells):
            for q in range(len(dfa.states)):
                policy.setdefault((s, q), 0)
        best = max(best, value_under(policy, x0, q0_effective, 0))
    return best


def test_criterion_8_robust_dp_correctness(synthesis_1d):
    # exact brute-force equivalence on a small MDP that resolves in two steps
    rng = np.random.default_rng(88)
    n_cells, n_inputs = 3, 2
    kernel = np.zeros((n_cells, n_inputs, n_cells + 1))
    for s in range(n_cells):
        for u in range(n_inputs):
            weights = rng.uniform(0.1, 1.0, size=n_cells + 1)
            weights[-1] *= 0.05
            kernel[s, u] = weights / weights.sum()
    p1 = Letter({"P1"})
    state_letters = [p1, p1 if rng.uniform() < 0.5 else EMPTY_LETTER, EMPTY_LETTER,
                     EMPTY_LETTER]
    from simquant.specs import Proposition

    dfa = template_bounded_invariance(
        Proposition("P1", Box([0.0], [1.0])), horizon=2
    )
    labeling = RobustLabeling(
        letters=[(letter,) for letter in state_letters],
        certain=np.ones(n_cells + 1, dtype=bool),
    )
    table, _ = robust_value_iteration(kernel, dfa, labeling, delta=0.0, tol=1e-14)
    q_index, trans, accepting = dfa.tables()
    for state in range(n_cells):
        q_eff = trans[q_index[dfa.initial], dfa.letter_id(state_letters[state])]
        brute = _brute_force_value(kernel, dfa, state_letters, state, q_eff, horizon=4)
        assert abs(table.values[state, q_eff] - brute) <= 1e-12

    # delta- and epsilon-monotonicity on the 1D parking study, pointwise
    bundle = synthesis_1d
    abstraction = bundle["abstraction"]
    dfa_park = bundle["dfa"]
    labeling_park = bundle["labeling"]
    slack = 1e-6  # fixed points compared at residual 1e-9
    tables = [
        robust_value_iteration(abstraction.kernel, dfa_park, labeling_park, d,
                               tol=1e-9)[0].values
        for d in (0.0, 0.006, 0.012, 0.024)
    ]
    for lower, higher in zip(tables, tables[1:]):
        assert (higher <= lower + slack).all()
    eps_tables = []
    for eps in (0.05, 0.2, 0.5):
        labeling = robust_labels(abstraction, bundle["propositions"], eps)
        eps_tables.append(
            robust_value_iteration(abstraction.kernel, dfa_park, labeling, 0.012,
                                   tol=1e-9)[0].values
        )
    for smaller, larger in zip(eps_tables, eps_tables[1:]):
        assert (larger <= smaller + slack).all()
    report("8 robust dynamic programming correctness")

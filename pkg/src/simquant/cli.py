"""Command-line front end for the quantify / synthesize / validate pipeline.

All outputs are plain CSV and JSON; plotting is left to external tools. Exit
codes: 0 success, 2 infeasible, 3 configuration error.
"""

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Box, LtiModel, build_grid, grid_spec_from_dict, load_model
from .mor import build_reduced, compose_transitive, load_reduced, optimize_epsilon_mor
from .simrel import InfeasibleError, SimRelation, optimize_epsilon
from .specs import load_spec, robust_labels
from .synthesis import (
    AbstractPolicy,
    MorRefinedController,
    monte_carlo_validate,
    refine_controller,
    robust_value_iteration,
    satisfaction_bounds,
)

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_CONFIG = 3


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """Resolved command-line options for one pipeline invocation."""

    model_path: Path
    out_dir: Path
    grid_path: Path | None = None
    spec_path: Path | None = None
    deltas: tuple = ()
    lambda_steps: int = 99
    seed: int = 0
    mor_path: Path | None = None
    runs: int = 10_000
    horizon: int = 100
    cells: int = 20

    def lambda_grid(self):
        if self.lambda_steps < 1:
            raise ConfigError("--lambda-steps must be at least 1")
        return tuple(np.arange(1, self.lambda_steps + 1) / (self.lambda_steps + 1))


def _fmt(x) -> str:
    return f"{float(x):.12g}"


def _hash_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_model_and_grid(config: RunConfig):
    try:
        model, grid = load_model(config.model_path)
    except FileNotFoundError as exc:
        raise ConfigError(f"model file not found: {exc.filename}") from exc
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid model file: {exc}") from exc
    if config.grid_path is not None:
        try:
            with open(config.grid_path) as fh:
                grid = grid_spec_from_dict(json.load(fh))
        except FileNotFoundError as exc:
            raise ConfigError(f"grid file not found: {exc.filename}") from exc
        except (ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"invalid grid file: {exc}") from exc
    if grid is None:
        raise ConfigError("no grid block in the model file and no --grid given")
    for d in config.deltas:
        if not 0.0 <= d < 1.0:
            raise ConfigError(f"delta values must lie in [0, 1), got {d}")
    return model, grid


def _load_specification(config: RunConfig):
    if config.spec_path is None:
        raise ConfigError("this command needs --spec")
    try:
        return load_spec(config.spec_path)
    except FileNotFoundError as exc:
        raise ConfigError(f"spec file not found: {exc.filename}") from exc
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid spec file: {exc}") from exc


def cmd_quantify(config: RunConfig) -> int:
    """Sweep the delta list and write the (delta, epsilon) frontier CSV."""
    model, grid = _load_model_and_grid(config)
    abstraction = build_grid(model, grid, build_kernel=False)
    lam_grid = config.lambda_grid()
    config.out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    n_ok = 0
    for i, delta in enumerate(config.deltas):
        start = time.perf_counter()
        try:
            rel = optimize_epsilon(model, abstraction, delta, lam_grid)
        except InfeasibleError:
            elapsed = 1000.0 * (time.perf_counter() - start)
            rows.append((_fmt(delta), "", "", f"{elapsed:.1f}", "infeasible"))
            continue
        elapsed = 1000.0 * (time.perf_counter() - start)
        rel.save(config.out_dir / f"relation_{i}.json")
        rows.append((_fmt(delta), _fmt(rel.epsilon), _fmt(rel.lam), f"{elapsed:.1f}", "ok"))
        n_ok += 1

    with open(config.out_dir / "frontier.csv", "w") as fh:
        fh.write("delta,epsilon,lambda_best,solve_time_ms,status\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    if config.deltas and n_ok == 0:
        print("quantify: every requested delta is infeasible", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _write_value_table(path, abstraction, table, policy):
    n = abstraction.representatives.shape[1]
    coords = ",".join(f"x{k + 1}" for k in range(n))
    with open(path, "w") as fh:
        fh.write(f"cell,{coords},dfa_state,value,input_index\n")
        for i, rep in enumerate(abstraction.representatives):
            rep_txt = ",".join(_fmt(v) for v in rep)
            for qi, q in enumerate(table.q_states):
                fh.write(
                    f"{i},{rep_txt},{q},{_fmt(table.values[i, qi])},"
                    f"{int(policy.choice[i, qi])}\n"
                )


def _write_satisfaction(path, abstraction, bounds):
    n = abstraction.representatives.shape[1]
    coords = ",".join(f"x{k + 1}" for k in range(n))
    with open(path, "w") as fh:
        fh.write(f"cell,{coords},bound\n")
        for i, rep in enumerate(abstraction.representatives):
            rep_txt = ",".join(_fmt(v) for v in rep)
            fh.write(f"{i},{rep_txt},{_fmt(bounds[i])}\n")


def _config_fingerprint(config: RunConfig) -> dict:
    fp = {
        "model_sha256": _hash_file(config.model_path),
        "spec_sha256": _hash_file(config.spec_path),
        "delta": [float(d) for d in config.deltas],
        "lambda_steps": config.lambda_steps,
        "seed": config.seed,
    }
    if config.grid_path is not None:
        fp["grid_sha256"] = _hash_file(config.grid_path)
    if config.mor_path is not None:
        fp["mor_sha256"] = _hash_file(config.mor_path)
    return fp


def cmd_synthesize(config: RunConfig) -> int:
    """Quantify, run robust value iteration, and export table, policy, summary."""
    model, grid = _load_model_and_grid(config)
    propositions, dfa = _load_specification(config)
    if len(config.deltas) != 1:
        raise ConfigError("synthesize needs exactly one --delta")
    delta = config.deltas[0]
    lam_grid = config.lambda_grid()
    config.out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()

    summary = {"config": _config_fingerprint(config)}
    if config.mor_path is None:
        synth_model = model
        synth_grid = grid
        try:
            abstraction = build_grid(model, grid, build_kernel=False)
            rel = optimize_epsilon(model, abstraction, delta, lam_grid)
        except InfeasibleError as exc:
            print(f"synthesize: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        eps_total, delta_total = rel.epsilon, rel.delta
        rel.save(config.out_dir / "relation.json")
        summary["relation"] = {"epsilon": rel.epsilon, "delta": rel.delta, "lambda": rel.lam}
    else:
        try:
            reduced, options = load_reduced(config.mor_path, model)
        except FileNotFoundError as exc:
            raise ConfigError(f"reduced-model file not found: {exc.filename}") from exc
        except ValueError as exc:
            raise ConfigError(f"invalid reduced-model file: {exc}") from exc
        if "state_box" not in options or "grid" not in options:
            raise ConfigError("the reduced-model file needs 'state_box' and 'grid' blocks")
        synth_model = LtiModel(
            A=reduced.A_r, B=reduced.B_r, B_w=reduced.B_rw, C=reduced.C_r,
            state_box=Box(np.array(options["state_box"]["lo"], dtype=float),
                          np.array(options["state_box"]["hi"], dtype=float)),
            input_box=model.input_box,
        )
        synth_grid = grid_spec_from_dict(options["grid"])
        try:
            rel_mor = optimize_epsilon_mor(
                model, reduced,
                delta_budget=float(options.get("delta_r", 0.01)),
                trunc_split=float(options.get("trunc_split", 0.5)),
                lam_grid=lam_grid,
                input_margin=float(options.get("input_margin", 0.0)),
            )
            abstraction = build_grid(synth_model, synth_grid, build_kernel=False)
            rel = optimize_epsilon(synth_model, abstraction, delta, lam_grid)
        except InfeasibleError as exc:
            print(f"synthesize: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        eps_total, delta_total = compose_transitive(rel, rel_mor)
        rel.save(config.out_dir / "relation.json")
        rel_mor.save(config.out_dir / "relation_mor.json")
        summary["relation"] = {"epsilon": rel.epsilon, "delta": rel.delta, "lambda": rel.lam}
        summary["relation_mor"] = {
            "epsilon": rel_mor.epsilon, "delta": rel_mor.delta,
            "delta_trunc": rel_mor.delta_trunc, "lambda": rel_mor.lam,
        }

    abstraction = build_grid(synth_model, synth_grid, build_kernel=True)
    labeling = robust_labels(abstraction, propositions, eps_total)
    table, policy = robust_value_iteration(abstraction.kernel, dfa, labeling, delta_total)
    policy = AbstractPolicy(policy.choice, policy.q_states, abstraction.input_samples)
    bounds = satisfaction_bounds(table, labeling, dfa)

    _write_value_table(config.out_dir / "valuetable.csv", abstraction, table, policy)
    _write_satisfaction(config.out_dir / "satisfaction.csv", abstraction, bounds)
    with open(config.out_dir / "policy.json", "w") as fh:
        json.dump(
            {
                "q_states": [str(q) for q in policy.q_states],
                "choice": policy.choice.tolist(),
                "input_samples": abstraction.input_samples.tolist(),
            },
            fh,
        )
        fh.write("\n")

    summary.update(
        {
            "epsilon_total": eps_total,
            "delta_total": delta_total,
            "iterations": table.iterations,
            "residual": table.residual,
            "wall_time_s": time.perf_counter() - start,
            "n_cells": abstraction.n_cells,
            "n_dfa_states": len(dfa.states),
            "n_product_states": (abstraction.n_cells + 1) * len(dfa.states),
            "mor": config.mor_path is not None,
        }
    )
    with open(config.out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def cmd_validate(config: RunConfig) -> int:
    """Monte-Carlo check of synthesized bounds; reads prior synthesize outputs."""
    summary_path = config.out_dir / "summary.json"
    try:
        with open(summary_path) as fh:
            summary = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"no synthesize outputs in {config.out_dir}") from exc
    model, grid = _load_model_and_grid(config)
    propositions, dfa = _load_specification(config)
    if config.runs < 1:
        raise ConfigError("--runs must be at least 1")
    fingerprint = _config_fingerprint(config)
    stored = summary.get("config", {})
    for key in ("model_sha256", "spec_sha256", "grid_sha256", "mor_sha256"):
        if key in stored and stored[key] != fingerprint.get(key):
            raise ConfigError(
                f"artifact mismatch: {key} differs between synthesize and validate inputs"
            )

    with open(config.out_dir / "policy.json") as fh:
        pol = json.load(fh)
    rel = SimRelation.load(config.out_dir / "relation.json")

    if summary.get("mor"):
        if config.mor_path is None:
            raise ConfigError("this run was synthesized with --mor; pass the same file")
        reduced, options = load_reduced(config.mor_path, model)
        synth_model = LtiModel(
            A=reduced.A_r, B=reduced.B_r, B_w=reduced.B_rw, C=reduced.C_r,
            state_box=Box(np.array(options["state_box"]["lo"], dtype=float),
                          np.array(options["state_box"]["hi"], dtype=float)),
            input_box=model.input_box,
        )
        synth_grid = grid_spec_from_dict(options["grid"])
        rel_mor = SimRelation.load(config.out_dir / "relation_mor.json")
    else:
        synth_model, synth_grid = model, grid

    abstraction = build_grid(synth_model, synth_grid, build_kernel=False)
    policy = AbstractPolicy(
        choice=np.array(pol["choice"], dtype=np.intp),
        q_states=tuple(pol["q_states"]),
        input_samples=np.array(pol["input_samples"], dtype=float),
    )

    bounds = {}
    with open(config.out_dir / "satisfaction.csv") as fh:
        header = fh.readline()
        for line in fh:
            parts = line.strip().split(",")
            bounds[int(parts[0])] = float(parts[-1])

    n_cells = abstraction.n_cells
    n_sample = min(config.cells, n_cells)
    cell_ids = np.unique(np.linspace(0, n_cells - 1, n_sample).astype(int))

    report_cells = []
    all_pass = True
    for cell in cell_ids:
        x0 = abstraction.representatives[cell]
        rng = np.random.default_rng([config.seed, int(cell)])
        if summary.get("mor"):
            controller = MorRefinedController(policy, rel, rel_mor, abstraction,
                                              reduced, model, dfa, propositions, rng)
        else:
            controller = refine_controller(policy, rel, abstraction, dfa, propositions, rng)
        result = monte_carlo_validate(
            model, controller, dfa, propositions, x0,
            n_runs=config.runs, horizon=config.horizon,
        )
        half_width = 0.5 * (result.wilson_high - result.wilson_low)
        bound = bounds[int(cell)]
        ok = result.frequency >= bound - half_width
        all_pass &= ok
        report_cells.append(
            {
                "cell": int(cell),
                "x0": [float(v) for v in x0],
                "bound": bound,
                "frequency": result.frequency,
                "wilson_low": result.wilson_low,
                "wilson_high": result.wilson_high,
                "delta_event_fraction": result.delta_event_fraction,
                "pass": bool(ok),
            }
        )

    with open(config.out_dir / "validation.json", "w") as fh:
        json.dump(
            {
                "cells": report_cells,
                "all_pass": bool(all_pass),
                "n_runs": config.runs,
                "horizon": config.horizon,
                "seed": config.seed,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return EXIT_OK


def cmd_reduce(config: RunConfig) -> int:
    """Complete and check a candidate reduction, writing the full reduced JSON."""
    model, _ = _load_model_and_grid(config)
    if config.mor_path is None:
        raise ConfigError("reduce needs --mor with the candidate reduced-model file")
    try:
        with open(config.mor_path) as fh:
            data = json.load(fh)
        reduced = build_reduced(
            model,
            P=np.array(data["P"], dtype=float),
            A_r=np.array(data["Ar"], dtype=float),
            B_r=np.array(data["Br"], dtype=float),
            B_rw=np.array(data["Brw"], dtype=float),
            R=np.array(data["R"], dtype=float),
        )
    except FileNotFoundError as exc:
        raise ConfigError(f"reduced-model file not found: {exc.filename}") from exc
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid reduction: {exc}") from exc
    config.out_dir.mkdir(parents=True, exist_ok=True)
    data.update(
        {
            "Ar": reduced.A_r.tolist(),
            "Br": reduced.B_r.tolist(),
            "Brw": reduced.B_rw.tolist(),
            "P": reduced.P.tolist(),
            "R": reduced.R.tolist(),
            "Q": reduced.Q.tolist(),
            "Cr": reduced.C_r.tolist(),
            "sylvester_residual": float(
                np.linalg.norm(reduced.P @ reduced.A_r - model.A @ reduced.P - model.B @ reduced.Q)
            ),
        }
    )
    with open(config.out_dir / "reduced.json", "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simquant",
        description="deviation bounds and controller synthesis for linear stochastic systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("quantify", "compute the (delta, epsilon) frontier"),
        ("synthesize", "synthesize a controller and its satisfaction bounds"),
        ("validate", "Monte-Carlo check of synthesized bounds"),
        ("reduce", "complete and check a candidate model reduction"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--model", required=True, help="model JSON file")
        p.add_argument("--grid", default=None, help="grid JSON file overriding the model's block")
        p.add_argument("--spec", default=None, help="specification JSON file")
        p.add_argument("--delta", action="append", type=float, default=None,
                       help="probability deviation (repeatable)")
        p.add_argument("--lambda-steps", type=int, default=99,
                       help="number of multiplier grid points (default 99)")
        p.add_argument("--seed", type=int, default=0, help="RNG seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--mor", default=None, help="reduced-model JSON file")
        p.add_argument("--runs", type=int, default=10_000,
                       help="Monte-Carlo runs per initial cell (validate)")
        p.add_argument("--horizon", type=int, default=100,
                       help="Monte-Carlo run length (validate)")
        p.add_argument("--cells", type=int, default=20,
                       help="number of sampled initial cells (validate)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    config = RunConfig(
        model_path=Path(args.model),
        grid_path=None if args.grid is None else Path(args.grid),
        spec_path=None if args.spec is None else Path(args.spec),
        deltas=tuple(args.delta or ()),
        lambda_steps=args.lambda_steps,
        seed=args.seed,
        out_dir=Path(args.out),
        mor_path=None if args.mor is None else Path(args.mor),
        runs=args.runs,
        horizon=args.horizon,
        cells=args.cells,
    )
    command = {
        "quantify": cmd_quantify,
        "synthesize": cmd_synthesize,
        "validate": cmd_validate,
        "reduce": cmd_reduce,
    }[args.command]
    try:
        return command(config)
    except ConfigError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

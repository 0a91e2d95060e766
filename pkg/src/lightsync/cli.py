"""Command-line front end: seeded Monte-Carlo simulation, parameter solving,
bound tables, and MMR file utilities, all emitting JSON on stdout.

Exit codes: 0 success, 1 configuration or usage error, 2 internal invariant
violation. Reports are byte-reproducible for a fixed (seed, config) apart
from the wall_time_s field.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
import time

from . import bounds as bnd
from . import simnet
from .mmr import MmrInclusionProof, MmrNodeStore, mmr_verify_inclusion
from .protocol import DiscoveryError, build_mmr_discovery, find_last_mmr
from .simnet import (
    AdversaryMmrStrategy,
    PopulationConfig,
    SimConfig,
    population_from_json,
    population_to_json,
    race_monte_carlo,
    run_challenge_race,
    run_velvet_history,
    sim_from_json,
    sim_to_json,
    substream,
)

DEFAULT_SEED_ENV = "LIGHTSYNC_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_epsilon(text: str) -> float:
    """Accepts decimal ('0.001', '1e-6') and power-of-two ('2^-20') forms."""
    m = re.fullmatch(r"2\^(-?\d+)", text.strip())
    if m:
        return 2.0 ** int(m.group(1))
    return float(text)


def parse_target(text: str) -> int:
    return int(text, 0)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="simulation seed (env LIGHTSYNC_SEED)")
    common.add_argument("--pretty", action="store_true", help="indent JSON output")
    parser = _Parser(prog="lightsync", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common],
                         help="Monte-Carlo races and velvet-history MMR discovery")
    sim.add_argument("--mode", choices=["race", "race-full", "velvet"], default="race")
    sim.add_argument("--trials", type=int, default=1000)
    sim.add_argument("--config", default=None, help="JSON file with population/sim sections")
    sim.add_argument("--lambda", dest="lambda_honest", type=float, default=None)
    sim.add_argument("--adversary-ratio", type=float, default=None)
    sim.add_argument("--upgraded-fraction", type=float, default=None)
    sim.add_argument("--honest-upgraded-fraction", type=float, default=None)
    sim.add_argument("--alpha", type=int, default=None)
    sim.add_argument("--strategy", choices=[s.value for s in AdversaryMmrStrategy], default=None)
    sim.add_argument("--challenge-period", type=float, default=None)
    sim.add_argument("--k", type=int, default=None)
    sim.add_argument("--delta", type=float, default=None)
    sim.add_argument("--inclusion-delay", type=float, default=None)
    sim.add_argument("--target", type=parse_target, default=None)
    sim.add_argument("--adversary-target", type=parse_target, default=None)
    sim.add_argument("--beta", type=int, default=7)
    sim.add_argument("--length", type=int, default=None, help="velvet history length")
    sim.add_argument("--transcript", default=None, help="race-full: write trial 0 events as JSON lines")

    par = sub.add_parser("params", parents=[common], help="solve challenge period, alpha, and beta for a target epsilon")
    par.add_argument("--epsilon", type=parse_epsilon, required=True)
    par.add_argument("--lambda", dest="lambda_honest", type=float, default=1.0)
    par.add_argument("--adversary-ratio", type=float, default=None)
    par.add_argument("--method", choices=["chernoff", "exact"], default="chernoff")
    par.add_argument("--k", type=int, default=None)
    par.add_argument("--m-a", type=float, default=None)
    par.add_argument("--alpha-epsilon", type=parse_epsilon, default=None)
    par.add_argument("--beta-epsilon", type=parse_epsilon, default=None)
    par.add_argument("--config", default=None)

    bou = sub.add_parser("bounds", parents=[common], help="evaluate race/vote bounds and the size tables")
    bou.add_argument("--table1", action="store_true")
    bou.add_argument("--header-bytes", type=int, default=508)
    bou.add_argument("--proof-headers", type=int, default=140)
    bou.add_argument("--chain-lengths", default="1e6,1e7,1e8")
    bou.add_argument("--table2", action="store_true")
    bou.add_argument("--theorem1", action="store_true")
    bou.add_argument("--lambda", dest="lambda_honest", type=float, default=1.0)
    bou.add_argument("--adversary-ratio", type=float, default=0.5)
    bou.add_argument("--t", type=float, default=None)
    bou.add_argument("--grid", type=int, default=64)
    bou.add_argument("--t2-factor", type=float, default=1.0, help="honest second-segment target / first")
    bou.add_argument("--adversary-target-factors", default=None,
                     help="comma list of adversary target multiples to sweep")
    bou.add_argument("--theorem2", action="store_true")
    bou.add_argument("--theorem3", action="store_true")
    bou.add_argument("--m-a", type=float, default=1 / 3)
    bou.add_argument("--beta", type=int, default=7)
    bou.add_argument("--alpha", type=int, default=80)

    mmr = sub.add_parser("mmr", parents=[common], help="append/prove/verify over a JSON node-store file")
    mmr_sub = mmr.add_subparsers(dest="mmr_command", required=True)
    app = mmr_sub.add_parser("append", parents=[common])
    app.add_argument("--store", required=True)
    app.add_argument("--leaf", action="append", required=True, help="hex leaf, repeatable")
    root = mmr_sub.add_parser("root", parents=[common])
    root.add_argument("--store", required=True)
    prove = mmr_sub.add_parser("prove", parents=[common])
    prove.add_argument("--store", required=True)
    prove.add_argument("--index", type=int, required=True)
    prove.add_argument("--leaf-count", type=int, default=None)
    verify = mmr_sub.add_parser("verify", parents=[common])
    verify.add_argument("--root", required=True)
    verify.add_argument("--leaf", required=True)
    verify.add_argument("--proof", required=True, help="JSON proof file")
    return parser


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get(DEFAULT_SEED_ENV, "0"))


def _simulate_configs(args, seed: int) -> tuple[PopulationConfig, SimConfig]:
    cfg = _load_config(args.config)
    pop_json = dict(cfg.get("population", {}))
    sim_json = dict(cfg.get("sim", {}))
    overrides = {
        "lambda_honest": args.lambda_honest,
        "adversary_ratio": args.adversary_ratio,
        "upgraded_fraction": args.upgraded_fraction,
        "upgraded_honest_fraction": args.honest_upgraded_fraction,
        "alpha": args.alpha,
        "adversary_mmr_strategy": args.strategy,
    }
    pop_json.update({k: v for k, v in overrides.items() if v is not None})
    pop_json.setdefault("lambda_honest", 1.0)
    population = population_from_json(pop_json)

    sim_overrides = {
        "challenge_period": args.challenge_period,
        "k": args.k,
        "delta": args.delta,
        "inclusion_delay": args.inclusion_delay,
    }
    sim_json.update({k: v for k, v in sim_overrides.items() if v is not None})
    sim_json.setdefault("challenge_period", 20.0)
    sim_json.setdefault("k", 6)
    if args.target is not None:
        sim_json["difficulty_schedule"] = [[hex(args.target), 0.0]]
    if args.adversary_target is not None:
        sim_json["adversary_schedule"] = [[hex(args.adversary_target), 0.0]]
    sim_json["seed"] = seed
    return population, sim_from_json(sim_json)


def _race_config_for(population: PopulationConfig, sim: SimConfig) -> bnd.RaceConfig:
    """RaceConfig matching the simulation schedules at their concrete change times."""
    hon = sim.difficulty_schedule
    adv = sim.adversary_schedule or sim.difficulty_schedule
    t = sim.challenge_period
    T1 = float(hon[0][0])
    T2, t1 = (float(hon[1][0]), hon[1][1]) if len(hon) > 1 else (T1, t)
    T1p = float(adv[0][0])
    T2p, t1p = (float(adv[1][0]), adv[1][1]) if len(adv) > 1 else (T1p, t)
    power = population.lambda_honest / T1
    adv_power = population.adversary_ratio * power
    return bnd.RaceConfig(
        lambda1=power * T1, lambda2=power * T2,
        lambda1p=adv_power * T1p, lambda2p=adv_power * T2p,
        T1=T1, T2=T2, T1p=T1p, T2p=T2p,
        t=t, t1=min(t1, t), t1p=min(t1p, t),
    )


def _analytic_bound(population: PopulationConfig, sim: SimConfig) -> float | None:
    if population.adversary_ratio <= 0 or sim.inclusion_delay > 0:
        return None
    cfg = _race_config_for(population, sim)
    return bnd.bound_T(bnd.m0_of(cfg), cfg)


def cmd_simulate(args, seed: int) -> dict:
    if args.trials < 1:
        raise ValueError("trials must be a positive integer")
    population, sim = _simulate_configs(args, seed)
    report = {
        "command": "simulate",
        "mode": args.mode,
        "seed": seed,
        "trials": args.trials,
        "config": {"population": population_to_json(population), "sim": sim_to_json(sim)},
    }
    started = time.perf_counter()

    if args.mode == "race":
        stats = race_monte_carlo(population, sim, args.trials, seed)
        report.update(
            adversary_wins=stats.adversary_wins,
            failure_rate=stats.failure_rate,
            ci95=list(stats.ci95),
            analytic_bound=_analytic_bound(population, sim),
        )
        if args.trials <= 1000:
            report["outcomes"] = [int(w) for w in stats.wins]
    elif args.mode == "race-full":
        qtx = _default_query(sim, seed)
        outcomes = []
        for trial in range(args.trials):
            rng = substream(seed, "race-full", trial)
            outcome = run_challenge_race(population, sim, qtx, rng)
            outcomes.append(outcome)
            if trial == 0 and args.transcript:
                with open(args.transcript, "w") as fh:
                    for event in outcome.transcript:
                        fh.write(json.dumps(event) + "\n")
        wins = sum(o.adversary_won for o in outcomes)
        rate = wins / args.trials
        half = 1.96 * math.sqrt(max(rate * (1 - rate), 1e-300) / args.trials)
        report.update(
            adversary_wins=wins,
            failure_rate=rate,
            ci95=[max(0.0, rate - half), min(1.0, rate + half)],
            analytic_bound=_analytic_bound(population, sim),
        )
        if args.trials <= 1000:
            report["outcomes"] = [int(o.adversary_won) for o in outcomes]
    else:
        report.update(_velvet_trials(population, args, seed))

    report["wall_time_s"] = round(time.perf_counter() - started, 6)
    return report


def _default_query(sim: SimConfig, seed: int):
    from .incentive import create_query_transaction

    issued = create_query_transaction(b"cli-query", 10, 15, sim.challenge_period,
                                      substream(seed, "query"))
    return issued.tx


def _velvet_trials(population: PopulationConfig, args, seed: int) -> dict:
    alpha, beta = population.alpha, args.beta
    length = args.length
    if length is None:
        need = alpha + beta
        length = int(need / population.upgraded_fraction * 1.5) + 8
    target = args.target if args.target is not None else simnet.DEFAULT_TARGET
    outcomes = {"success": 0, "no_honest_candidate": 0, "vote_overwhelm": 0,
                "insufficient_upgraded": 0}
    per_trial = []
    for trial in range(args.trials):
        hist = run_velvet_history(population, length, substream(seed, "velvet", trial),
                                  target=target)
        fin = hist.headers[-1]
        upgraded_positions = [h for h in range(length) if hist.upgraded[h]]
        if len(upgraded_positions) < alpha + beta:
            outcomes["insufficient_upgraded"] += 1
            per_trial.append("insufficient_upgraded")
            continue
        candidates = upgraded_positions[-(alpha + beta):][:beta]
        label = None
        try:
            proof = build_mmr_discovery(hist.headers, hist.coinbases, fin, alpha, beta,
                                        node_store=hist.store)
            root = find_last_mmr(proof, fin, alpha, beta)
            if root == hist.honest_root_over(length):
                label = "success"
        except DiscoveryError:
            label = None
        if label is None:
            if all(hist.adversary[h] for h in candidates):
                label = "no_honest_candidate"
            else:
                label = "vote_overwhelm"
        outcomes[label] += 1
        per_trial.append(label)
    failures = args.trials - outcomes["success"]
    tail = bnd.invalid_root_vote_tail(1 - population.upgraded_honest_fraction, alpha)
    result = {
        "alpha": alpha,
        "beta": beta,
        "history_length": length,
        "outcomes": outcomes,
        "failure_rate": failures / args.trials,
        "candidate_miss_bound": bnd.candidates_miss_prob(
            1 - population.upgraded_honest_fraction, beta
        ),
        "vote_tail_closed_form": tail.closed_form,
    }
    if args.trials <= 1000:
        result["per_trial"] = per_trial
    return result


def cmd_params(args, seed: int) -> dict:
    cfg = _load_config(args.config)
    security = cfg.get("security", {})
    ratio = args.adversary_ratio
    if ratio is None:
        ratio = security.get("adversary_ratio", 0.5)
    lam = args.lambda_honest
    report = {"command": "params", "epsilon": args.epsilon, "method": args.method}
    t, headers = bnd.solve_challenge_period(args.epsilon, lam, ratio * lam, args.method)
    report.update(
        lambda_honest=lam,
        adversary_ratio=ratio,
        challenge_period=t,
        expected_headers=headers,
    )
    k = args.k if args.k is not None else security.get("k")
    if k is not None:
        report["expected_headers_floored"] = max(headers, k + 1)
    m_a = args.m_a if args.m_a is not None else security.get("M_a")
    if m_a is not None:
        report["M_a"] = m_a
        report["alpha"] = bnd.solve_alpha(args.alpha_epsilon or args.epsilon, m_a)
        report["beta"] = bnd.solve_beta(args.beta_epsilon or args.epsilon, m_a)
        report["alpha_epsilon"] = args.alpha_epsilon or args.epsilon
        report["beta_epsilon"] = args.beta_epsilon or args.epsilon
    return report


def cmd_bounds(args) -> dict:
    report = {"command": "bounds"}
    if not (args.table1 or args.table2 or args.theorem1 or args.theorem2 or args.theorem3):
        raise ValueError("nothing to do: pass --table1/--table2/--theorem1/--theorem2/--theorem3")
    if args.table1:
        lengths = [int(float(x)) for x in args.chain_lengths.split(",") if x]
        model = bnd.SizeModel(header_bytes=args.header_bytes,
                              expected_proof_headers=args.proof_headers)
        report["table1"] = bnd.proof_size_table(model, lengths)
        # the published constant-size figure; the delta is reported, not asserted
        report["table1_reference_MB"] = 0.076
        report["table1_delta_MB"] = round(
            args.proof_headers * args.header_bytes / 1e6 - 0.076, 6
        )
    if args.table2:
        report["table2"] = bnd.protocol_comparison()
    if args.theorem1:
        if args.t is None:
            raise ValueError("--theorem1 needs --t")
        lam = args.lambda_honest
        cfg = bnd.RaceConfig(
            lambda1=lam, lambda2=lam * args.t2_factor,
            lambda1p=args.adversary_ratio * lam, lambda2p=args.adversary_ratio * lam * args.t2_factor,
            T1=1.0, T2=args.t2_factor, T1p=1.0, T2p=args.t2_factor,
            t=args.t, t1=args.t, t1p=args.t,
        )
        sweep = None
        if args.adversary_target_factors:
            factors = [float(x) for x in args.adversary_target_factors.split(",") if x]
            sweep = [(f, f * args.t2_factor) for f in factors]
        res = bnd.theorem1_failure_bound(cfg, grid=args.grid, adversary_targets=sweep)
        report["theorem1"] = {
            "bound": res.bound,
            "m0": res.m0,
            "argmax": {"t1": res.t1, "t1p": res.t1p, "T1p": res.T1p, "T2p": res.T2p},
            "exact_equal_target": (
                bnd.exact_race_failure(lam, args.adversary_ratio * lam, args.t)
                if args.t2_factor == 1.0
                else None
            ),
        }
    if args.theorem2:
        report["theorem2"] = {
            "M_a": args.m_a,
            "beta": args.beta,
            "candidates_miss_prob": bnd.candidates_miss_prob(args.m_a, args.beta),
        }
    if args.theorem3:
        tail = bnd.invalid_root_vote_tail(args.m_a, args.alpha)
        report["theorem3"] = {
            "M_a": args.m_a,
            "alpha": args.alpha,
            "exact": float(tail.exact),
            "exact_rational": f"{tail.exact.numerator}/{tail.exact.denominator}",
            "closed_form": tail.closed_form,
        }
    return report


def cmd_mmr(args) -> dict:
    if args.mmr_command == "append":
        if os.path.exists(args.store):
            with open(args.store) as fh:
                store = MmrNodeStore.from_json(json.load(fh))
        else:
            store = MmrNodeStore()
        for leaf in args.leaf:
            store.append(bytes.fromhex(leaf))
        with open(args.store, "w") as fh:
            json.dump(store.to_json(), fh)
        return {"command": "mmr", "leaf_count": store.leaf_count, "root": store.root().hex()}
    with open(args.store if args.mmr_command != "verify" else args.proof) as fh:
        data = json.load(fh)
    if args.mmr_command == "root":
        store = MmrNodeStore.from_json(data)
        return {"command": "mmr", "leaf_count": store.leaf_count, "root": store.root().hex()}
    if args.mmr_command == "prove":
        store = MmrNodeStore.from_json(data)
        proof = store.prove_inclusion(args.index, args.leaf_count)
        return {"command": "mmr", "proof": proof.to_json(),
                "root": store.root(args.leaf_count).hex()}
    proof = MmrInclusionProof.from_json(data)
    ok = mmr_verify_inclusion(bytes.fromhex(args.root), bytes.fromhex(args.leaf), proof)
    return {"command": "mmr", "valid": bool(ok)}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    seed = _resolve_seed(args)
    try:
        if args.command == "simulate":
            report = cmd_simulate(args, seed)
        elif args.command == "params":
            report = cmd_params(args, seed)
        elif args.command == "bounds":
            report = cmd_bounds(args)
        else:
            report = cmd_mmr(args)
    except (ValueError, OSError, KeyError, json.JSONDecodeError, bnd.BoundsSearchError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # invariant violation: anything the validators let through
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    print(json.dumps(report, indent=2 if args.pretty else None))
    return 0


if __name__ == "__main__":
    sys.exit(main())

from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path
import argparse
import json
import logging

from fixtures import DEFAULT_HARDWARE, PROJECT_ROOT, dataset_for, resolve_network
from utils.accuracy import frozen_inference_accuracy, load_dataset
from utils.agent import AgentHyper
from utils.cost import Budgets, HardwareConfig, budget_violations, load_hardware_config
from utils.env import FULL_WEIGHT_QBNS, QbnChoices, RewardWeights
from utils.errors import AutoQError, BudgetInfeasibleError, ConfigError, SearchSpaceTooLargeError, SpecError
from utils.model import NetworkSpec, load_network_spec, policy_to_json, read_policy_file, write_policy_file
from utils.search import (
    POLICY_FILENAME,
    TRACE_FILENAME,
    SearchConfig,
    brute_force_search,
    evaluate_policy,
    layerwise_baseline_search,
    network_wise_search,
    policy_reward,
    run_ablation,
    run_search,
    run_sweep,
)
from utils.trace import save_frame

logger = logging.getLogger(__name__)

GENERATED_ROOT = PROJECT_ROOT / "src" / "generated"
DEFAULT_QBN_SET = "1,2,3,4"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3


def _int_list(text: str) -> list[int]:
    try:
        return [int(token) for token in text.split(",") if token.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_problem(args: argparse.Namespace) -> tuple[NetworkSpec, HardwareConfig, RewardWeights]:
    net = load_network_spec(resolve_network(args.net))
    hw = load_hardware_config(Path(args.hw))
    flags = Budgets(args.budget_latency, args.budget_energy, args.budget_area)
    if args.mode == "resource":
        if not flags.is_empty:
            hw = replace(hw, budgets=flags)
        weights = RewardWeights.resource_constrained()
    else:
        if not flags.is_empty:
            raise ConfigError("budgets apply to --mode resource only")
        weights = RewardWeights.accuracy_guaranteed(args.psi_l, args.psi_e, args.psi_a)
    return net, hw, weights


def _search_config(args: argparse.Namespace, out_dir: Path | None) -> SearchConfig:
    net, hw, weights = _load_problem(args)
    hyper = AgentHyper()
    if args.hyper:
        hyper = AgentHyper.from_mapping(json.loads(Path(args.hyper).read_text(encoding="utf-8")))
    episodes = args.episodes if args.episodes is not None else hyper.episodes
    explore = args.explore_episodes
    if explore is None and 0 < episodes < hyper.explore_episodes:
        explore = episodes // 4
    if explore is not None:
        hyper = replace(hyper, explore_episodes=explore, exploit_episodes=max(episodes - explore, 0))
    choices = QbnChoices()
    if args.qbn_set is not None or args.act_qbn_set is not None:
        choices = QbnChoices.from_sets(args.qbn_set or FULL_WEIGHT_QBNS, args.act_qbn_set)
    return SearchConfig(
        net=net,
        hw=hw,
        weights=weights,
        episodes=episodes,
        seed=args.seed,
        hyper=hyper,
        reward_timing=args.reward_timing,
        choices=choices,
        out_dir=out_dir,
        checkpoint_path=Path(args.checkpoint) if args.checkpoint else None,
        checkpoint_every=args.checkpoint_every,
    )


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else GENERATED_ROOT / args.command


def _print_report(label: str, report, reward: float) -> None:
    print(
        f"{label}: reward={reward:.6f} accuracy={report.accuracy:.6f} latency_s={report.latency_s:.6g} "
        f"energy_j={report.energy_j:.6g} area={report.area_units:.6g}"
    )


def cmd_search(args: argparse.Namespace) -> int:
    out_dir = _out_dir(args)
    config = _search_config(args, out_dir)
    result = run_search(config, resume_from=Path(args.resume) if args.resume else None)
    _print_report(f"best policy (episode {result.best_episode})", result.best_report, result.best_reward)
    print(f"Saved trace to {out_dir / TRACE_FILENAME}")
    print(f"Saved policy to {out_dir / POLICY_FILENAME}")
    return EXIT_OK


def _exhaustive(args: argparse.Namespace, runner) -> int:
    net, hw, weights = _load_problem(args)
    result = runner(net, hw, weights, args.qbn_set, args.act_qbn_set)
    _print_report(f"optimum over {result.evaluations} points", result.report, result.reward)
    out_dir = _out_dir(args)
    path = write_policy_file(out_dir / POLICY_FILENAME, result.policy, net)
    (out_dir / "best_policy.json").write_text(policy_to_json(result.policy, net), encoding="utf-8")
    print(f"Saved policy to {path}")
    return EXIT_OK


def cmd_brute(args: argparse.Namespace) -> int:
    return _exhaustive(args, brute_force_search)


def cmd_baseline(args: argparse.Namespace) -> int:
    runner = layerwise_baseline_search if args.granularity == "layer" else network_wise_search
    return _exhaustive(args, runner)


def cmd_eval(args: argparse.Namespace) -> int:
    net, hw, weights = _load_problem(args)
    policy = read_policy_file(Path(args.policy), net)
    report = evaluate_policy(net, hw, policy)
    _print_report("policy", report, policy_reward(net, hw, weights, policy))
    if hw.budgets is not None and not hw.budgets.is_empty:
        violations = budget_violations(report, hw.budgets)
        print("budgets: " + ("; ".join(violations) if violations else "met"))
    dataset = Path(args.dataset) if args.dataset else None
    if dataset is None and args.with_dataset:
        dataset = dataset_for(net.name)
        if dataset is None:
            raise ConfigError(f"no bundled dataset for network {net.name!r}")
    if dataset is not None:
        accuracy = frozen_inference_accuracy(net, policy, load_dataset(dataset))
        print(f"frozen inference accuracy: {accuracy:.6f}")
    return EXIT_OK


def cmd_pack(args: argparse.Namespace) -> int:
    net = load_network_spec(resolve_network(args.net))
    policy = read_policy_file(Path(args.policy), net)
    path = write_policy_file(Path(args.out), policy, net)
    print(f"Saved policy to {path}")
    return EXIT_OK


def cmd_unpack(args: argparse.Namespace) -> int:
    net = load_network_spec(resolve_network(args.net))
    policy = read_policy_file(Path(args.policy), net)
    text = policy_to_json(policy, net)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"Saved policy JSON to {args.out}")
    else:
        print(text)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    out_dir = _out_dir(args)
    config = _search_config(args, None)
    _, summary = run_sweep(config, args.seeds, out_dir)
    print(summary.to_string(index=False))
    print(f"Saved merged trace to {out_dir / 'sweep_trace.csv'}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    out_dir = _out_dir(args)
    config = _search_config(args, None)
    try:
        optimum = brute_force_search(config.net, config.hw, config.weights, args.qbn_set, args.act_qbn_set).reward
    except SearchSpaceTooLargeError as exc:
        logger.warning("%s; measuring against the best run instead", exc)
        optimum = None
    runs, summary = run_ablation(config, args.seeds, optimum, args.fraction)
    save_frame(runs, out_dir / "ablation_runs.csv")
    path = save_frame(summary, out_dir / "ablation_summary.csv")
    print(summary.to_string(index=False))
    print(f"Saved ablation summary to {path}")
    return EXIT_OK


def _add_problem_args(parser: argparse.ArgumentParser, with_out: bool = True) -> None:
    parser.add_argument("--net", required=True, help="Bundled network name (e.g. tiny2x2) or path to a network JSON")
    parser.add_argument("--hw", default=str(DEFAULT_HARDWARE), help="Hardware config JSON")
    parser.add_argument("--mode", choices=("resource", "accuracy"), default="accuracy")
    parser.add_argument("--budget-latency", type=float, help="Latency budget in seconds")
    parser.add_argument("--budget-energy", type=float, help="Energy budget in joules")
    parser.add_argument("--budget-area", type=float, help="Area budget in area units")
    _add_psi_args(parser)
    if with_out:
        parser.add_argument("--out", help="Output directory (default: src/generated/<command>)")


def _add_psi_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--psi-l", type=float, default=0.1, help="Latency exponent (accuracy mode)")
    parser.add_argument("--psi-e", type=float, default=0.1, help="Energy exponent (accuracy mode)")
    parser.add_argument("--psi-a", type=float, default=0.1, help="Area exponent (accuracy mode)")


def _add_search_args(parser: argparse.ArgumentParser, qbn_default: str | None = None) -> None:
    _add_problem_args(parser)
    _add_space_args(parser, qbn_default)
    parser.add_argument("--episodes", type=int, help="Episode count (default: explore + exploit = 400)")
    parser.add_argument("--explore-episodes", type=int, help="Constant-noise episodes before decay")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--hyper", help="JSON file of agent hyperparameter overrides")
    parser.add_argument("--reward-timing", choices=("per-step", "episode-end"), default="per-step")
    parser.add_argument("--checkpoint", help="Checkpoint file written every --checkpoint-every episodes")
    parser.add_argument("--checkpoint-every", type=int, default=0)


def _add_space_args(parser: argparse.ArgumentParser, qbn_default: str | None = DEFAULT_QBN_SET) -> None:
    default = _int_list(qbn_default) if qbn_default else None
    default_help = qbn_default or "0..8 with pruning"
    parser.add_argument("--qbn-set", type=_int_list, default=default, help=f"Weight QBNs (default: {default_help})")
    parser.add_argument("--act-qbn-set", type=_int_list, help="Activation QBNs (default: the weight set without 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autoq", description="Kernel-wise mixed-precision quantization search")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    search = sub.add_parser("search", help="Hierarchical RL search")
    _add_search_args(search)
    search.add_argument("--resume", help="Resume from a checkpoint file")

    brute = sub.add_parser("brute", help="Exhaustive kernel-wise search")
    _add_problem_args(brute)
    _add_space_args(brute)

    baseline = sub.add_parser("baseline", help="Exhaustive layer-wise or network-wise search")
    _add_problem_args(baseline)
    _add_space_args(baseline)
    baseline.add_argument("--granularity", choices=("layer", "network"), default="layer")

    evaluate = sub.add_parser("eval", help="Cost and reward of a stored policy")
    _add_problem_args(evaluate, with_out=False)
    evaluate.add_argument("--policy", required=True, help="Policy file (.bin or .json)")
    evaluate.add_argument("--dataset", help="Labeled samples for frozen-weight inference accuracy")
    evaluate.add_argument("--with-dataset", action="store_true", help="Use the bundled dataset of the network")

    pack = sub.add_parser("pack", help="Policy JSON to binary")
    pack.add_argument("--net", required=True)
    pack.add_argument("--policy", required=True)
    pack.add_argument("--out", required=True)

    unpack = sub.add_parser("unpack", help="Policy binary to JSON")
    unpack.add_argument("--net", required=True)
    unpack.add_argument("--policy", required=True)
    unpack.add_argument("--out")

    sweep = sub.add_parser("sweep", help="Seeded searches merged into one trace")
    _add_search_args(sweep)
    sweep.add_argument("--seeds", type=_int_list, default=_int_list("0,1,2,3,4,5,6,7,8,9"))

    ablate = sub.add_parser("ablate", help="Scheduled zeta against goal-only intrinsic reward")
    _add_search_args(ablate, DEFAULT_QBN_SET)
    ablate.add_argument("--seeds", type=_int_list, default=_int_list("0,1,2,3,4,5,6,7,8,9"))
    ablate.add_argument("--fraction", type=float, default=0.9)
    return parser


SUBCOMMANDS = {
    "search": cmd_search,
    "brute": cmd_brute,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "pack": cmd_pack,
    "unpack": cmd_unpack,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def cli_main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK

    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return SUBCOMMANDS[args.command](args)
    except BudgetInfeasibleError as exc:
        logger.error("infeasible budget: %s", exc)
        return EXIT_INFEASIBLE
    except (ConfigError, SpecError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except AutoQError as exc:
        logger.error("%s", exc)
        return EXIT_ERROR


def main() -> int:
    return cli_main()


if __name__ == "__main__":
    raise SystemExit(main())

import json

from main import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, build_parser, cli_main
from utils.env import RewardWeights
from utils.model import QbnPolicy, load_network_spec, read_policy_file, write_policy_file
from utils.search import policy_reward
from fixtures import resolve_network


def test_parser_knows_every_subcommand():
    parser = build_parser()
    for command in ("search", "brute", "baseline", "sweep", "ablate"):
        assert parser.parse_args([command, "--net", "tiny2x2"]).command == command
    for command in ("eval", "unpack"):
        assert parser.parse_args([command, "--net", "tiny2x2", "--policy", "p.bin"]).command == command
    assert parser.parse_args(["pack", "--net", "tiny2x2", "--policy", "p.json", "--out", "p.bin"]).command == "pack"


def test_brute_writes_optimal_policy(tiny2x2, tmp_path, capsys):
    assert cli_main(["brute", "--net", "tiny2x2", "--out", str(tmp_path)]) == EXIT_OK
    assert read_policy_file(tmp_path / "best_policy.bin", tiny2x2) == QbnPolicy(((2, 1), (1, 2)), (1, 2))
    assert "optimum over 4096 points" in capsys.readouterr().out


def test_baseline_network_granularity(tiny2x2, tmp_path):
    code = cli_main(["baseline", "--net", "tiny2x2", "--granularity", "network", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert read_policy_file(tmp_path / "best_policy.bin", tiny2x2) == QbnPolicy.uniform(tiny2x2, 2, 1)


def test_unpack_then_pack_round_trip(tiny2x2, tmp_path, capsys):
    policy = QbnPolicy(((2, 1), (1, 2)), (1, 2))
    binary = write_policy_file(tmp_path / "p.bin", policy, tiny2x2)
    assert cli_main(["unpack", "--net", "tiny2x2", "--policy", str(binary), "--out", str(tmp_path / "p.json")]) == EXIT_OK
    assert json.loads((tmp_path / "p.json").read_text())["network"] == "tiny2x2"
    assert cli_main(["pack", "--net", "tiny2x2", "--policy", str(tmp_path / "p.json"), "--out", str(tmp_path / "q.bin")]) == EXIT_OK
    assert (tmp_path / "q.bin").read_bytes() == binary.read_bytes()
    capsys.readouterr()
    assert cli_main(["unpack", "--net", "tiny2x2", "--policy", str(binary)]) == EXIT_OK
    assert '"network"' in capsys.readouterr().out


def test_eval_with_bundled_dataset(tmp_path, capsys):
    net = load_network_spec(resolve_network("toy_classifier"))
    policy = write_policy_file(tmp_path / "p.bin", QbnPolicy.uniform(net, 8, 8), net)
    assert cli_main(["eval", "--net", "toy_classifier", "--policy", str(policy), "--with-dataset"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "policy: reward=" in out
    assert "frozen inference accuracy: 1.000000" in out


def test_eval_without_bundled_dataset(tiny2x2, tmp_path):
    policy = write_policy_file(tmp_path / "p.bin", QbnPolicy.uniform(tiny2x2, 4, 4), tiny2x2)
    assert cli_main(["eval", "--net", "tiny2x2", "--policy", str(policy), "--with-dataset"]) == EXIT_CONFIG


def test_search_with_small_hyper(tmp_path):
    hyper = tmp_path / "hyper.json"
    hyper.write_text(json.dumps({"hidden": [8], "batch_size": 8, "buffer_capacity": 100}))
    code = cli_main([
        "search", "--net", "tiny2x2", "--episodes", "8", "--hyper", str(hyper), "--out", str(tmp_path / "run"),
    ])
    assert code == EXIT_OK
    assert (tmp_path / "run" / "trace.csv").exists()
    assert (tmp_path / "run" / "best_policy.bin").exists()


def test_config_errors_exit_2(tmp_path):
    assert cli_main([]) == EXIT_CONFIG
    assert cli_main(["brute"]) == EXIT_CONFIG
    assert cli_main(["brute", "--net", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert cli_main(["brute", "--net", "tiny2x2", "--budget-latency", "1e-5", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert cli_main(["brute", "--net", "tiny2x2", "--qbn-set", "1,x"]) == EXIT_CONFIG


def test_infeasible_budget_exits_3(tmp_path):
    code = cli_main(["brute", "--net", "tiny2x2", "--mode", "resource", "--budget-area", "5", "--out", str(tmp_path)])
    assert code == EXIT_INFEASIBLE


def test_search_infeasible_budget_exits_3(tmp_path):
    code = cli_main([
        "search", "--net", "tiny2x2", "--mode", "resource", "--budget-area", "5", "--episodes", "8",
        "--out", str(tmp_path),
    ])
    assert code == EXIT_INFEASIBLE


def _report_fields(line: str) -> str:
    return line.split(": ", 1)[1]


def test_eval_reproduces_the_searched_best(tmp_path, capsys):
    hyper = tmp_path / "hyper.json"
    hyper.write_text(json.dumps({"hidden": [8], "batch_size": 8, "buffer_capacity": 100}))
    run = tmp_path / "run"
    args = ["search", "--net", "tiny2x2", "--episodes", "8", "--hyper", str(hyper), "--qbn-set", "1,2,3,4"]
    assert cli_main([*args, "--out", str(run)]) == EXIT_OK
    searched = next(line for line in capsys.readouterr().out.splitlines() if line.startswith("best policy"))
    best = read_policy_file(run / "best_policy.bin", load_network_spec(resolve_network("tiny2x2")))
    assert set(best.weight_array().tolist()) <= {1, 2, 3, 4}

    assert cli_main(["eval", "--net", "tiny2x2", "--policy", str(run / "best_policy.bin")]) == EXIT_OK
    evaluated = next(line for line in capsys.readouterr().out.splitlines() if line.startswith("policy:"))
    assert _report_fields(evaluated) == _report_fields(searched)


def test_eval_in_resource_mode_reports_budgets(tiny2x2, hw, tmp_path, capsys):
    uniform = QbnPolicy.uniform(tiny2x2, 8, 8)
    policy = write_policy_file(tmp_path / "p.bin", uniform, tiny2x2)
    code = cli_main(["eval", "--net", "tiny2x2", "--policy", str(policy), "--mode", "resource", "--budget-area", "20"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    reward = policy_reward(tiny2x2, hw, RewardWeights.resource_constrained(), uniform)
    assert f"policy: reward={reward:.6f}" in out
    assert "budgets: area 74 > 20" in out

    code = cli_main(["eval", "--net", "tiny2x2", "--policy", str(policy), "--budget-area", "20"])
    assert code == EXIT_CONFIG

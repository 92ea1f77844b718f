"""
Search orchestration: the hierarchical RL episode loop, the exhaustive
baselines (kernel-wise, layer-wise, network-wise) and policy evaluation.
"""
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
import logging
import math
import sys

SRC_PATH = Path(__file__).resolve().parents[1]
if str(SRC_PATH) not in sys.path:
    sys.path.append(str(SRC_PATH))

import numpy as np
import pandas as pd

from utils.accuracy import AccuracyModelParams, derive_sensitivities, proxy_accuracy, proxy_accuracy_batch
from utils.agent import (
    AgentHyper,
    HierarchicalAgent,
    HighTransition,
    LayerRollout,
    LowTransition,
    make_high_transition,
)
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.cost import (
    Budgets,
    CostReport,
    HardwareConfig,
    cost_batch,
    estimate_cost,
    reference_report,
    smallest_work_report,
    within_budgets,
)
from utils.env import (
    REWARD_TIMINGS,
    QbnChoices,
    QuantizationEnv,
    RewardMode,
    RewardWeights,
    extrinsic_reward,
    extrinsic_reward_batch,
    intrinsic_step_rewards,
    normalize_report,
)
from utils.errors import BudgetInfeasibleError, ConfigError, SearchSpaceTooLargeError
from utils.model import (
    ACT_QBN_MIN,
    QBN_MAX,
    STATE_DIM,
    NetworkSpec,
    QbnPolicy,
    avg_act_qbn,
    avg_weight_qbn,
    layer_avg_weight_qbn,
    policy_to_json,
    write_policy_file,
)
from utils.trace import (
    LayerRow,
    TraceRow,
    episodes_to_fraction,
    layer_frame,
    load_seed_traces,
    save_frame,
    summarize_seeds,
    trace_frame,
)

logger = logging.getLogger(__name__)

MAX_EXHAUSTIVE_POINTS = 10 ** 7
ENUMERATION_CHUNK = 1 << 16

TRACE_FILENAME = "trace.csv"
LAYERS_FILENAME = "layers.csv"
POLICY_FILENAME = "best_policy.bin"
POLICY_JSON_FILENAME = "best_policy.json"


@dataclass(frozen=True)
class SearchConfig:
    net: NetworkSpec
    hw: HardwareConfig
    weights: RewardWeights
    episodes: int | None = None
    seed: int = 0
    hyper: AgentHyper = field(default_factory=AgentHyper)
    reward_timing: str = "per-step"
    choices: QbnChoices = field(default_factory=QbnChoices)
    out_dir: Path | None = None
    log_every: int = 50
    checkpoint_path: Path | None = None
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        episodes = self.total_episodes
        if episodes < 0:
            raise ConfigError("episodes must be non-negative")
        if 0 < episodes < self.hyper.explore_episodes:
            raise ConfigError(
                f"episodes ({episodes}) must cover the {self.hyper.explore_episodes} exploration episodes"
            )
        if self.reward_timing not in REWARD_TIMINGS:
            raise ConfigError(f"reward_timing must be one of {REWARD_TIMINGS}")
        budgets = self.hw.budgets
        if self.weights.mode is RewardMode.RESOURCE and (budgets is None or budgets.is_empty):
            raise ConfigError("resource-constrained search needs at least one budget")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("log_every must be positive and checkpoint_every non-negative")

    @property
    def total_episodes(self) -> int:
        return self.hyper.episodes if self.episodes is None else self.episodes


@dataclass
class SearchResult:
    best_policy: QbnPolicy
    best_report: CostReport
    best_reward: float
    best_episode: int
    trace: list[TraceRow]
    layers: list[LayerRow]
    relabel_changes: int = 0

    def trace_frame(self) -> pd.DataFrame:
        return trace_frame(self.trace)


@dataclass(frozen=True)
class ExhaustiveResult:
    policy: QbnPolicy
    reward: float
    report: CostReport
    evaluations: int


def evaluate_policy(
    net: NetworkSpec,
    hw: HardwareConfig,
    policy: QbnPolicy,
    accuracy: AccuracyModelParams | None = None,
) -> CostReport:
    params = accuracy if accuracy is not None else derive_sensitivities(net)
    return estimate_cost(net, policy, hw, proxy_accuracy(params, policy))


def policy_reward(
    net: NetworkSpec,
    hw: HardwareConfig,
    weights: RewardWeights,
    policy: QbnPolicy,
    accuracy: AccuracyModelParams | None = None,
) -> float:
    report = evaluate_policy(net, hw, policy, accuracy)
    normalized = normalize_report(report, reference_report(net, hw), smallest_work_report(net, hw))
    return extrinsic_reward(normalized, weights)


# hierarchical RL loop

@dataclass
class _Episode:
    policy: QbnPolicy
    report: CostReport
    reward: float
    layers: list[LayerRow]


def _run_episode(
    env: QuantizationEnv,
    agent: HierarchicalAgent,
    episode: int,
    sigma: float,
    zeta: float,
    train: bool,
) -> _Episode:
    net = env.net
    state = env.reset().as_array()
    for layer in net.layers:
        act_state = state
        act_goal = agent.goal(act_state, sigma)
        result = env.step(act_goal)
        weight_state = result.state.as_array()
        if train:
            agent.remember_high(HighTransition(
                state=act_state, goal=result.applied, reward=result.reward, next_state=weight_state, done=False,
            ))

        weight_goal = agent.goal(weight_state, sigma)
        state = env.set_goal(weight_goal).as_array()
        rollout = LayerRollout(start_state=weight_state, goal=weight_goal)
        qbns = []
        for _ in range(layer.c_out):
            action = agent.action(state, weight_goal, sigma)
            result = env.step(action)
            rollout.states.append(state)
            rollout.actions.append(result.applied)
            rollout.erds.append(result.reward)
            qbns.append(result.qbn)
            state = result.state.as_array() if result.state is not None else np.zeros(STATE_DIM)
        rollout.next_state = state
        rollout.done = result.done

        if train:
            rewards = intrinsic_step_rewards(env.choices.goal_weight(weight_goal), qbns, rollout.erds, zeta)
            for j, reward in enumerate(rewards):
                last = j == layer.c_out - 1
                agent.remember_low(LowTransition(
                    state=rollout.states[j],
                    goal=weight_goal,
                    action=rollout.actions[j],
                    reward=reward,
                    next_state=state if last else rollout.states[j + 1],
                    done=last,
                ))
            agent.remember_high(make_high_transition(rollout))
            for _ in range(layer.c_out * agent.hyper.updates_per_step):
                agent.train_llc()
            # one activation-goal and one weight-goal transition per layer
            for _ in range(2 * agent.hyper.updates_per_step):
                agent.train_hlc()

    policy = env.final_policy()
    report, reward = env.evaluate(policy)
    layers = [
        LayerRow(episode=episode, layer=index, avg_wqbn=avg, aqbn=policy.act_qbn[index])
        for index, avg in enumerate(layer_avg_weight_qbn(net, policy))
    ]
    return _Episode(policy=policy, report=report, reward=reward, layers=layers)


def _trace_row(net: NetworkSpec, episode: int, run: _Episode) -> TraceRow:
    return TraceRow(
        episode=episode,
        reward=run.reward,
        accuracy=run.report.accuracy,
        latency_s=run.report.latency_s,
        energy_j=run.report.energy_j,
        area=run.report.area_units,
        avg_wqbn=avg_weight_qbn(net, run.policy),
        avg_aqbn=avg_act_qbn(net, run.policy),
    )


def _fingerprint(config: SearchConfig) -> dict[str, object]:
    return {
        "network": config.net.name,
        "seed": config.seed,
        "episodes": config.total_episodes,
        "hyper": config.hyper,
        "weights": config.weights,
        "reward_timing": config.reward_timing,
        "choices": config.choices,
    }


def run_search(config: SearchConfig, resume_from: Path | None = None) -> SearchResult:
    net = config.net
    env = QuantizationEnv(
        net,
        config.hw,
        config.weights,
        reward_timing=config.reward_timing,
        gamma_erd=config.hyper.gamma_erd,
        choices=config.choices,
    )
    episodes = config.total_episodes

    start = 0
    trace: list[TraceRow] = []
    layers: list[LayerRow] = []
    best: tuple[float, int, QbnPolicy, CostReport] | None = None
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["fingerprint"] != _fingerprint(config):
            raise ConfigError(f"{resume_from}: checkpoint was written for a different search configuration")
        agent = payload["agent"]
        start = payload["episode"]
        trace, layers, best = payload["trace"], payload["layers"], payload["best"]
        logger.info("resuming %s from episode %d", net.name, start)
    else:
        agent = HierarchicalAgent(config.hyper, np.random.default_rng(config.seed))

    if episodes == 0:
        # untrained greedy rollout
        run = _run_episode(env, agent, 0, sigma=0.0, zeta=agent.zeta(0, 1), train=False)
        trace.append(_trace_row(net, 0, run))
        layers.extend(run.layers)
        if within_budgets(run.report, env.budgets):
            best = (run.reward, 0, run.policy, run.report)

    for episode in range(start, episodes):
        sigma = agent.sigma(episode)
        zeta = agent.zeta(episode, episodes)
        run = _run_episode(env, agent, episode, sigma, zeta, train=True)
        trace.append(_trace_row(net, episode, run))
        layers.extend(run.layers)
        if within_budgets(run.report, env.budgets) and (best is None or run.reward > best[0]):
            best = (run.reward, episode, run.policy, run.report)
        if (episode + 1) % config.log_every == 0:
            logger.info(
                "episode %d/%d reward %.4f best %.4f sigma %.4f zeta %.3f",
                episode + 1, episodes, run.reward, best[0] if best else float("nan"), sigma, zeta,
            )
        if config.checkpoint_path is not None and config.checkpoint_every and (episode + 1) % config.checkpoint_every == 0:
            save_checkpoint(config.checkpoint_path, {
                "fingerprint": _fingerprint(config),
                "episode": episode + 1,
                "agent": agent,
                "trace": trace,
                "layers": layers,
                "best": best,
            })

    if best is None:
        raise BudgetInfeasibleError("no episode produced a policy within the budgets")
    logger.debug("relabeling changed %d sampled goals", agent.relabel_changes)
    reward, episode, policy, report = best
    result = SearchResult(
        best_policy=policy,
        best_report=report,
        best_reward=reward,
        best_episode=episode,
        trace=trace,
        layers=layers,
        relabel_changes=agent.relabel_changes,
    )
    if config.out_dir is not None:
        write_outputs(result, net, config.out_dir)
    return result


def export_trace(result: SearchResult, path: Path) -> Path:
    return save_frame(result.trace_frame(), path)


def write_outputs(result: SearchResult, net: NetworkSpec, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    json_path = out_dir / POLICY_JSON_FILENAME
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(policy_to_json(result.best_policy, net), encoding="utf-8")
    return [
        export_trace(result, out_dir / TRACE_FILENAME),
        save_frame(layer_frame(result.layers), out_dir / LAYERS_FILENAME),
        write_policy_file(out_dir / POLICY_FILENAME, result.best_policy, net),
        json_path,
    ]


# exhaustive baselines

def _normalize_sets(qbn_set: Sequence[int], act_qbn_set: Sequence[int] | None) -> tuple[np.ndarray, np.ndarray]:
    choices = QbnChoices.from_sets(qbn_set, act_qbn_set)
    return np.array(choices.weights, dtype=np.int64), np.array(choices.acts, dtype=np.int64)


def _exhaustive(
    net: NetworkSpec,
    hw: HardwareConfig,
    weights: RewardWeights,
    choices: Sequence[np.ndarray],
    expand: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    budgets: Budgets | None,
    accuracy: AccuracyModelParams | None,
) -> ExhaustiveResult:
    """Maximize the extrinsic reward over the product of ``choices``.

    Points are visited in lexicographic order of the chosen values, so the
    first maximum is the lexicographically smallest optimal point.
    """
    shape = tuple(len(c) for c in choices)
    total = math.prod(shape)
    if total > MAX_EXHAUSTIVE_POINTS:
        raise SearchSpaceTooLargeError(f"search space holds {total:,} points, limit is {MAX_EXHAUSTIVE_POINTS:,}")
    params = accuracy if accuracy is not None else derive_sensitivities(net)
    reference = reference_report(net, hw)
    floor = smallest_work_report(net, hw)

    best_reward = -math.inf
    best_values: np.ndarray | None = None
    for start in range(0, total, ENUMERATION_CHUNK):
        index = np.arange(start, min(start + ENUMERATION_CHUNK, total))
        digits = np.unravel_index(index, shape)
        values = np.column_stack([choice[d] for choice, d in zip(choices, digits)])
        w, a = expand(values)
        latency, energy, area = cost_batch(net, hw, w, a)
        rewards = extrinsic_reward_batch(
            proxy_accuracy_batch(params, w, a),
            np.maximum(latency, floor.latency_s) / reference.latency_s,
            np.maximum(energy, floor.energy_j) / reference.energy_j,
            area / reference.area_units,
            weights,
        )
        if budgets is not None:
            feasible = np.ones(len(index), dtype=bool)
            if budgets.latency_s is not None:
                feasible &= latency <= budgets.latency_s
            if budgets.energy_j is not None:
                feasible &= energy <= budgets.energy_j
            if budgets.area_units is not None:
                feasible &= area <= budgets.area_units
            rewards = np.where(feasible, rewards, -np.inf)
        position = int(np.argmax(rewards))
        if rewards[position] > best_reward:
            best_reward = float(rewards[position])
            best_values = values[position]

    if best_values is None:
        raise BudgetInfeasibleError("no point of the search space meets the budgets")
    w, a = expand(best_values[None, :])
    policy = QbnPolicy.from_flat(net, w[0], a[0])
    report = estimate_cost(net, policy, hw, proxy_accuracy(params, policy))
    reward = extrinsic_reward(normalize_report(report, reference, floor), weights)
    logger.info("exhaustive search over %d points: best reward %.6f", total, reward)
    return ExhaustiveResult(policy=policy, reward=reward, report=report, evaluations=total)


def _search_budgets(hw: HardwareConfig, weights: RewardWeights, budgets: Budgets | None) -> Budgets | None:
    if budgets is not None:
        return budgets
    return hw.budgets if weights.mode is RewardMode.RESOURCE else None


def brute_force_search(
    net: NetworkSpec,
    hw: HardwareConfig,
    weights: RewardWeights,
    qbn_set: Sequence[int],
    act_qbn_set: Sequence[int] | None = None,
    budgets: Budgets | None = None,
    accuracy: AccuracyModelParams | None = None,
) -> ExhaustiveResult:
    """Kernel-wise optimum; points are ordered like ``QbnPolicy.entries`` (per layer: activation, kernels)."""
    weight_set, act_set = _normalize_sets(qbn_set, act_qbn_set)
    choices, act_cols, weight_cols = [], [], []
    for layer in net.layers:
        act_cols.append(len(choices))
        choices.append(act_set)
        for _ in range(layer.c_out):
            weight_cols.append(len(choices))
            choices.append(weight_set)

    def expand(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return values[:, weight_cols], values[:, act_cols]

    return _exhaustive(net, hw, weights, choices, expand, _search_budgets(hw, weights, budgets), accuracy)


def layerwise_baseline_search(
    net: NetworkSpec,
    hw: HardwareConfig,
    weights: RewardWeights,
    qbn_set: Sequence[int],
    act_qbn_set: Sequence[int] | None = None,
    budgets: Budgets | None = None,
    accuracy: AccuracyModelParams | None = None,
) -> ExhaustiveResult:
    """One weight QBN and one activation QBN per layer."""
    weight_set, act_set = _normalize_sets(qbn_set, act_qbn_set)
    choices = []
    for _ in net.layers:
        choices.extend((act_set, weight_set))
    kernel_layer = net.kernel_layer

    def expand(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return values[:, 1::2][:, kernel_layer], values[:, 0::2]

    return _exhaustive(net, hw, weights, choices, expand, _search_budgets(hw, weights, budgets), accuracy)


def network_wise_search(
    net: NetworkSpec,
    hw: HardwareConfig,
    weights: RewardWeights,
    qbn_set: Sequence[int],
    act_qbn_set: Sequence[int] | None = None,
    budgets: Budgets | None = None,
    accuracy: AccuracyModelParams | None = None,
) -> ExhaustiveResult:
    """A single global weight QBN and a single global activation QBN."""
    weight_set, act_set = _normalize_sets(qbn_set, act_qbn_set)

    def expand(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.repeat(values[:, 1:2], net.n_kernels, axis=1),
            np.repeat(values[:, 0:1], net.n_layer, axis=1),
        )

    return _exhaustive(net, hw, weights, (act_set, weight_set), expand, _search_budgets(hw, weights, budgets), accuracy)


# multi-run drivers

def run_sweep(config: SearchConfig, seeds: Sequence[int], out_dir: Path) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Independent seeded searches; returns the merged trace and the per-seed summary."""
    out_dir = Path(out_dir)
    paths = {}
    for seed in seeds:
        seed_dir = out_dir / f"seed_{seed}"
        run_search(replace(config, seed=seed, out_dir=seed_dir, checkpoint_path=None))
        paths[seed] = seed_dir / TRACE_FILENAME
    merged = load_seed_traces(paths)
    summary = summarize_seeds(merged)
    save_frame(merged, out_dir / "sweep_trace.csv")
    save_frame(summary, out_dir / "sweep_summary.csv")
    return merged, summary


ABLATION_ARMS: tuple[tuple[str, float | None], ...] = (("shaped", None), ("goal-only", 0.0))


def run_ablation(
    config: SearchConfig,
    seeds: Sequence[int],
    optimum: float | None = None,
    fraction: float = 0.9,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Episodes needed to reach ``fraction`` of ``optimum`` with the scheduled zeta vs zeta pinned at 0.

    Without a known optimum the best reward over every run stands in for it.
    """
    results = []
    for arm, fixed in ABLATION_ARMS:
        hyper = replace(config.hyper, fixed_zeta=fixed)
        for seed in seeds:
            result = run_search(replace(config, hyper=hyper, seed=seed, out_dir=None, checkpoint_path=None))
            results.append((arm, seed, result))
    if optimum is None:
        optimum = max(result.best_reward for _, _, result in results)

    rows = []
    for arm, seed, result in results:
        reached = episodes_to_fraction(result.trace_frame(), optimum, fraction)
        rows.append({
            "arm": arm,
            "seed": seed,
            "best_reward": result.best_reward,
            "episodes_to_target": reached if reached is not None else config.total_episodes,
            "reached": reached is not None,
        })
    runs = pd.DataFrame(rows)
    summary = (
        runs.groupby("arm", sort=False)
        .agg(median_episodes=("episodes_to_target", "median"), reached=("reached", "sum"), runs=("seed", "count"))
        .reset_index()
    )
    return runs, summary

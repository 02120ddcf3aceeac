"""Experiment harnesses: repeated trials, memory transfer across
environments, multi-world cycling, and the tariff-shock cumulative ablation.

Every harness is deterministic given its config: trial i always runs with
seed base+i, transfer arms share the same phase-2 seed so memory content is
the only varying factor, and multi-world runs never reset environment state
between cycles.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

from .backends import CompletionBackend, CompletionResult, ReplayBackend, ScriptedBackend
from .cognition import Agent, PersonaConfig
from .envs.auction import AuctionEnv, AuctionItem
from .envs.economy import EconomyConfig, EconomyEnv
from .envs.market import MarketConfig, MarketEnv, NewsItem, buy_sell_ratio, load_news_feed
from .envs.questionnaire import Item, QuestionnaireEnv, load_item_bank
from .envs.social import SocialEnv, star_profiles
from .errors import AgentMissing, ConfigError, TooFewSamples, ZeroVariance
from .memory import BufferMemory, MemoryEntry, MemoryStore, memory_from_spec
from .protocol import Environment, EpisodeLog, EventRecord, run_episode
from .stats import mean_and_pstdev, paired_t_test


# --- config-driven construction -------------------------------------------------


@dataclass
class ExperimentConfig:
    """One fully-specified experiment: environment, roster, backend, runner knobs."""

    runner: str
    environment: dict[str, Any]
    agents: dict[str, Any] = field(default_factory=dict)
    backend: dict[str, Any] = field(default_factory=dict)
    trials: int = 1
    seed: int = 0
    max_steps: int = 100_000
    out: str | None = None
    transfer: dict[str, Any] | None = None
    multiworld: dict[str, Any] | None = None
    ablation: dict[str, Any] | None = None


def build_backend(spec: Mapping[str, Any]) -> CompletionBackend:
    kind = spec.get("kind", "scripted")
    if kind == "scripted":
        rules = []
        for rule in spec.get("rules", []):
            needle = rule["contains"]
            rules.append(
                (lambda text, needle=needle: needle in text, CompletionResult(content=rule["content"]))
            )
        default = CompletionResult(content=spec.get("default_content", "{}"))
        return ScriptedBackend(rules=rules, default=default)
    if kind == "replay":
        with open(spec["transcript_path"], "r", encoding="utf-8") as fh:
            return ReplayBackend.from_jsonl(fh.read(), strict=spec.get("strict", True))
    if kind == "remote":
        from .backends import RemoteBackend

        return RemoteBackend(
            endpoint=spec["endpoint"],
            auth_env=spec.get("auth_env"),
            in_flight_limit=spec.get("in_flight_limit", 4),
            timeout=spec.get("timeout", 30.0),
        )
    raise ConfigError(f"unknown backend kind {kind!r}", field="backend.kind")


def build_environment(spec: Mapping[str, Any], seed: int) -> Environment:
    kind = spec.get("kind")
    params = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "market":
        news_feed = params.pop("news_feed", [])
        if isinstance(news_feed, str):
            with open(news_feed, "r", encoding="utf-8") as fh:
                feed = load_news_feed(fh.read())
        else:
            import datetime as dt

            feed = [
                NewsItem(date=dt.date.fromisoformat(n["date"]), headline=n["headline"], body=n.get("body", ""))
                for n in news_feed
            ]
        cfg = MarketConfig(
            n_agents=params.pop("agents", 50),
            days=params.pop("days", 10),
            news_feed=feed,
            **params,
        )
        return MarketEnv(cfg)
    if kind == "economy":
        cfg = EconomyConfig(
            n_households=params.pop("agents", 100),
            months=params.pop("months", 240),
            seed=seed,
            **params,
        )
        return EconomyEnv(cfg)
    if kind == "social":
        n = params.pop("agents", 111)
        return SocialEnv(
            star_profiles(n, influencer=params.pop("influencer", 0)),
            feed_cap=params.pop("feed_cap", 10),
            seed_post=params.pop("seed_post", None),
        )
    if kind == "auction":
        items = [
            AuctionItem(
                name=i["name"],
                starting_price=i["starting_price"],
                true_value=i["true_value"],
                estimated_value=i["estimated_value"],
            )
            for i in params.pop("items")
        ]
        n = params.pop("agents", 3)
        return AuctionEnv(items, bidder_ids=list(range(n)), **params)
    if kind == "questionnaire":
        items_spec = params.pop("items")
        if isinstance(items_spec, str):
            with open(items_spec, "r", encoding="utf-8") as fh:
                items = load_item_bank(fh.read())
        else:
            items = load_item_bank("\n".join(__import__("json").dumps(i) for i in items_spec))
        n = params.pop("agents", 1)
        return QuestionnaireEnv(items, seed=seed, agent_ids=list(range(n)), **params)
    raise ConfigError(f"unknown environment kind {kind!r}", field="environment.kind")


def _agent_count(env: Environment) -> int:
    if isinstance(env, MarketEnv):
        return env.config.n_agents
    if isinstance(env, EconomyEnv):
        return env.config.n_households
    if isinstance(env, SocialEnv):
        return len(env.profiles)
    if isinstance(env, AuctionEnv):
        return len(env.bidder_ids)
    if isinstance(env, QuestionnaireEnv):
        return len(env.agent_ids)
    raise ConfigError(f"cannot infer roster size for {type(env).__name__}")


def build_agents(
    roster: Mapping[str, Any],
    backend: CompletionBackend,
    n_agents: int,
    world_tag: str,
) -> dict[int, Agent]:
    persona = PersonaConfig(
        persona_text=roster.get("persona_text", ""),
        role_tag=roster.get("role_tag", ""),
        extra_directives=list(roster.get("extra_directives", [])),
    )
    memory_spec = roster.get("memory", {"kind": "null"})
    return {
        aid: Agent(
            agent_id=aid,
            config=copy.deepcopy(persona),
            memory=memory_from_spec(memory_spec),
            backend=backend,
            world_tag=world_tag,
            max_tool_rounds=roster.get("max_tool_rounds", 5),
            max_parse_retries=roster.get("max_parse_retries", 2),
        )
        for aid in range(n_agents)
    }


def build_setup(config: ExperimentConfig, seed: int) -> tuple[Environment, dict[int, Agent]]:
    env = build_environment(config.environment, seed)
    backend = build_backend(config.backend)
    agents = build_agents(config.agents, backend, _agent_count(env), world_tag=env.name)
    return env, agents


# --- repeated trials ----------------------------------------------------------------


@dataclass
class TrialsResult:
    rows: list[tuple[int, dict[str, float]]]
    failures: list[tuple[int, str]]
    logs: list[EpisodeLog]

    def metric_names(self) -> list[str]:
        names: set[str] = set()
        for _, metrics in self.rows:
            names.update(metrics)
        return sorted(names)

    def summary(self) -> tuple[dict[str, float], dict[str, float]]:
        """Per-metric mean and population standard deviation over trials."""
        means: dict[str, float] = {}
        stds: dict[str, float] = {}
        for name in self.metric_names():
            values = [m[name] for _, m in self.rows if name in m]
            means[name], stds[name] = mean_and_pstdev(values)
        return means, stds

    def to_csv(self) -> str:
        names = self.metric_names()
        lines = ["seed," + ",".join(names)]
        for seed, metrics in self.rows:
            lines.append(str(seed) + "," + ",".join(str(metrics.get(n, "")) for n in names))
        means, stds = self.summary()
        lines.append("mean," + ",".join(str(means[n]) for n in names))
        lines.append("stddev," + ",".join(str(stds[n]) for n in names))
        return "\n".join(lines) + "\n"


def run_trials(
    config: ExperimentConfig,
    setup: Callable[[int], tuple[Environment, Mapping[int, Any]]] | None = None,
) -> TrialsResult:
    """Run ``config.trials`` independent episodes with seeds base, base+1, ...

    A failing trial is recorded under ``failures`` and the rest proceed.
    ``setup`` overrides config-driven construction (used by other harnesses).
    """
    if config.trials < 1:
        raise ConfigError("trials must be >= 1", field="trials")
    rows: list[tuple[int, dict[str, float]]] = []
    failures: list[tuple[int, str]] = []
    logs: list[EpisodeLog] = []
    for i in range(config.trials):
        seed = config.seed + i
        try:
            env, agents = (setup or (lambda s: build_setup(config, s)))(seed)
            log = run_episode(env, agents, max_steps=config.max_steps, seed=seed)
            rows.append((seed, env.metrics()))
            logs.append(log)
        except Exception as exc:  # a broken trial must not sink the study
            failures.append((seed, f"{type(exc).__name__}: {exc}"))
    return TrialsResult(rows=rows, failures=failures, logs=logs)


# --- memory transfer ------------------------------------------------------------------


@dataclass
class TransferPlan:
    """Phase 1 populates memories in the source world; phase 2 administers the
    instrument twice, with carried and with fresh stores."""

    source_env_factory: Callable[[int], Environment]
    agent_ids: list[int]
    agent_factory: Callable[[int, MemoryStore], Agent]
    memory_factory: Callable[[], MemoryStore]
    source_steps: int = 10
    carry_memory: bool = True
    seed: int = 0
    phase2_seed: int = 0


@dataclass
class InstrumentSpec:
    items: list[Item]


@dataclass
class TransferResult:
    diffs_by_pair: dict[str, float]
    per_agent: dict[int, dict[str, float]]
    t_tests: dict[str, tuple[float, float, int] | None]
    source_archives: dict[int, str]
    carry_bias: dict[int, dict[str, float]] = field(default_factory=dict)
    fresh_bias: dict[int, dict[str, float]] = field(default_factory=dict)


def run_memory_transfer(plan: TransferPlan, instrument: InstrumentSpec) -> TransferResult:
    """Per-pair bias difference: carried-memory arm minus fresh-memory arm."""
    source_env = plan.source_env_factory(plan.seed)
    phase1_agents = {aid: plan.agent_factory(aid, plan.memory_factory()) for aid in plan.agent_ids}
    for agent in phase1_agents.values():
        agent.world_tag = source_env.name
    run_episode(source_env, phase1_agents, max_steps=plan.source_steps, seed=plan.seed)
    archives = {aid: phase1_agents[aid].memory.to_jsonl() for aid in plan.agent_ids}

    def administer(restore: bool) -> dict[int, dict[str, float]]:
        env = QuestionnaireEnv(instrument.items, seed=plan.phase2_seed, agent_ids=plan.agent_ids)
        agents = {}
        for aid in plan.agent_ids:
            memory = MemoryStore.from_jsonl(archives[aid]) if restore else plan.memory_factory()
            agent = plan.agent_factory(aid, memory)
            agent.world_tag = env.name
            agents[aid] = agent
        run_episode(env, agents, max_steps=len(instrument.items), seed=plan.phase2_seed)
        return {aid: env.score_report(aid).bias_by_pair for aid in plan.agent_ids}

    carry_scores = administer(restore=plan.carry_memory)
    fresh_scores = administer(restore=False)

    per_agent: dict[int, dict[str, float]] = {}
    for aid in plan.agent_ids:
        per_agent[aid] = {
            pair: carry_scores[aid][pair] - fresh_scores[aid][pair] for pair in carry_scores[aid]
        }
    pairs = sorted({pair for diffs in per_agent.values() for pair in diffs})
    diffs_by_pair = {
        pair: sum(per_agent[aid][pair] for aid in plan.agent_ids) / len(plan.agent_ids)
        for pair in pairs
    }
    t_tests: dict[str, tuple[float, float, int] | None] = {}
    for pair in pairs:
        samples = [per_agent[aid][pair] for aid in plan.agent_ids]
        try:
            t_tests[pair] = paired_t_test(samples)
        except (TooFewSamples, ZeroVariance):
            t_tests[pair] = None
    return TransferResult(
        diffs_by_pair=diffs_by_pair,
        per_agent=per_agent,
        t_tests=t_tests,
        source_archives=archives,
        carry_bias=carry_scores,
        fresh_bias=fresh_scores,
    )


# --- multi-world -----------------------------------------------------------------------


@dataclass
class MultiWorldSchedule:
    environments: list[Environment]
    cycles: int

    def __post_init__(self):
        if len(self.environments) < 2:
            raise ValueError("a multi-world schedule needs at least two environments")
        if self.cycles < 0:
            raise ValueError("cycles must be >= 0")


def run_multiworld(schedule: MultiWorldSchedule, agents: Mapping[int, Any], seed: int = 0) -> EpisodeLog:
    """Cycle a shared roster through the environments, one step each per cycle.

    Agent configs and memories persist across phases; environment states are
    never reset between cycles. Log records carry their world tag in
    ``info["world"]``.
    """
    observations = {id(env): env.reset() for env in schedule.environments}
    marks = {id(env): 0 for env in schedule.environments}
    records: list[EventRecord] = []
    total_rewards = {aid: 0.0 for aid in agents}
    steps = 0
    for _cycle in range(schedule.cycles):
        for env in schedule.environments:
            if env.done():
                continue
            actions = {}
            for aid in sorted(observations[id(env)]):
                obs = observations[id(env)][aid]
                if obs.response_schema is None:
                    continue
                if aid not in agents:
                    raise AgentMissing(f"actionable observation for unknown agent {aid}")
                agent = agents[aid]
                if hasattr(agent, "world_tag"):
                    agent.world_tag = env.name
                actions[aid] = agent.step(obs) if hasattr(agent, "step") else agent(obs)
            observations[id(env)] = env.step(actions)
            steps += 1
            for aid, obs in observations[id(env)].items():
                if obs.reward is not None and aid in total_rewards:
                    total_rewards[aid] += obs.reward
            fresh = env.events.snapshot(marks[id(env)])
            marks[id(env)] += len(fresh)
            for record in fresh:
                records.append(
                    EventRecord(
                        user_id=record.user_id,
                        current_time=record.current_time,
                        action=record.action,
                        info={**record.info, "world": env.name},
                    )
                )
    return EpisodeLog(records=records, total_rewards=total_rewards, seed=seed, steps_executed=steps)


# --- tariff ablation -------------------------------------------------------------------


@dataclass(frozen=True)
class AblationSetting:
    """Cumulative levels: 1 = base, 2 = +headline config, 3 = +research
    memory, 4 = +news tool."""

    level: int

    def __post_init__(self):
        if not 1 <= self.level <= 4:
            raise ValueError("ablation level must be 1..4")

    @property
    def headline_config(self) -> bool:
        return self.level >= 2

    @property
    def research_memory(self) -> bool:
        return self.level >= 3

    @property
    def news_tool(self) -> bool:
        return self.level >= 4


def default_settings() -> list[AblationSetting]:
    return [AblationSetting(level) for level in (1, 2, 3, 4)]


@dataclass
class TariffStudy:
    """Everything the cumulative ablation needs besides the settings list."""

    base_config: MarketConfig
    headline: str
    research_summary: str
    news_feed: list[NewsItem]
    backend_factory: Callable[[int], CompletionBackend]
    persona_factory: Callable[[int], PersonaConfig] | None = None
    memory_factory: Callable[[], MemoryStore] = lambda: BufferMemory(capacity=3)
    trials: int = 5
    base_seed: int = 0


def ablation_agents(study: TariffStudy, setting: AblationSetting) -> dict[int, Agent]:
    """Wire one setting's cognitive stack: config, memory, backend per agent."""
    agents = {}
    for aid in range(study.base_config.n_agents):
        persona = (
            copy.deepcopy(study.persona_factory(aid))
            if study.persona_factory
            else PersonaConfig(persona_text="You are a stock trader.")
        )
        if setting.headline_config:
            persona.extra_directives.append(study.headline)
        memory = study.memory_factory()
        if setting.research_memory:
            memory.record(
                MemoryEntry(time=0, world_tag="market", role="note", content=study.research_summary)
            )
        agents[aid] = Agent(
            agent_id=aid,
            config=persona,
            memory=memory,
            backend=study.backend_factory(aid),
            world_tag="market",
        )
    return agents


def ablation_environment(study: TariffStudy, setting: AblationSetting) -> MarketEnv:
    cfg = replace(
        study.base_config,
        enable_news_tool=setting.news_tool,
        news_feed=list(study.news_feed) if setting.news_tool else [],
    )
    return MarketEnv(cfg)


@dataclass
class AblationRow:
    setting: int
    stock_a: float
    stock_b: float
    delta_a: float | None
    delta_b: float | None


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def to_csv(self) -> str:
        lines = ["setting,stock_A,stock_B,delta_A,delta_B"]
        for row in self.rows:
            da = "" if row.delta_a is None else str(row.delta_a)
            db = "" if row.delta_b is None else str(row.delta_b)
            lines.append(f"{row.setting},{row.stock_a},{row.stock_b},{da},{db}")
        return "\n".join(lines) + "\n"


def run_tariff_ablation(
    study: TariffStudy,
    settings: Sequence[AblationSetting] | None = None,
) -> AblationTable:
    """Mean buy/sell ratio per stock for each setting, with row-over-row deltas."""
    settings = list(settings or default_settings())
    rows: list[AblationRow] = []
    for setting in settings:
        ratios_a: list[float] = []
        ratios_b: list[float] = []
        for i in range(study.trials):
            seed = study.base_seed + i
            env = ablation_environment(study, setting)
            agents = ablation_agents(study, setting)
            log = run_episode(env, agents, max_steps=1_000_000, seed=seed)
            ratios_a.append(buy_sell_ratio(log.records, "A"))
            ratios_b.append(buy_sell_ratio(log.records, "B"))
        mean_a = sum(ratios_a) / len(ratios_a)
        mean_b = sum(ratios_b) / len(ratios_b)
        previous = rows[-1] if rows else None
        rows.append(
            AblationRow(
                setting=setting.level,
                stock_a=mean_a,
                stock_b=mean_b,
                delta_a=None if previous is None else mean_a - previous.stock_a,
                delta_b=None if previous is None else mean_b - previous.stock_b,
            )
        )
    return AblationTable(rows=rows)

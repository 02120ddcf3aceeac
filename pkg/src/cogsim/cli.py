"""Command-line entry point: load an experiment config, dispatch a runner,
write the output bundle, print a summary.

Every run leaves a bundle directory with events.jsonl, metrics.csv,
summary.txt, and a manifest.json written last that inventories the other
files with content hashes. Reruns of the same config and seed with a
scripted backend reproduce events.jsonl and metrics.csv byte for byte.

Exit codes: 0 success, 1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import sys
from pathlib import Path
from typing import Any

from . import __version__
from .envs.economy import EconomyEnv, phillips_okun_report
from .envs.market import MarketEnv, load_news_feed, session_metrics_csv
from .envs.questionnaire import load_item_bank
from .errors import ConfigError, SimulationError
from .protocol import EpisodeLog, run_episode
from .runners import (
    AblationSetting,
    ExperimentConfig,
    InstrumentSpec,
    MultiWorldSchedule,
    TariffStudy,
    TransferPlan,
    build_agents,
    build_backend,
    build_environment,
    build_setup,
    run_memory_transfer,
    run_multiworld,
    run_tariff_ablation,
    run_trials,
)

SUBCOMMANDS = ("run", "trials", "transfer", "multiworld", "ablation", "score")

TOP_LEVEL_KEYS = {
    "runner", "environment", "agents", "backend",
    "trials", "seed", "max_steps", "out",
    "transfer", "multiworld", "ablation",
}
AGENT_KEYS = {"memory", "persona_text", "role_tag", "extra_directives", "max_tool_rounds", "max_parse_retries"}
BACKEND_KEYS = {"kind", "rules", "default_content", "transcript_path", "strict", "endpoint", "auth_env", "in_flight_limit", "timeout"}
TRANSFER_KEYS = {"source", "source_steps", "carry_memory", "items", "phase2_seed"}
MULTIWORLD_KEYS = {"environments", "cycles"}
ABLATION_KEYS = {"headline", "summary", "news", "settings"}


def _reject_unknown(section: dict[str, Any], allowed: set[str], prefix: str) -> None:
    for key in section:
        if key not in allowed:
            path = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f'unknown key "{key}"', field=path)


def load_config(path: str | Path) -> ExperimentConfig:
    """Strictly parse a JSON experiment config.

    Defaults: runner "run", seed 0, trials 1, max_steps 100000. Unknown keys
    anywhere in the recognized sections are rejected with their dotted path.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(raw, TOP_LEVEL_KEYS, "")
    if "environment" not in raw:
        raise ConfigError("missing required section", field="environment")
    if not isinstance(raw["environment"], dict) or "kind" not in raw["environment"]:
        raise ConfigError("environment needs a kind", field="environment.kind")
    agents = raw.get("agents", {})
    _reject_unknown(agents, AGENT_KEYS, "agents")
    backend = raw.get("backend", {"kind": "scripted"})
    _reject_unknown(backend, BACKEND_KEYS, "backend")
    if raw.get("transfer") is not None:
        _reject_unknown(raw["transfer"], TRANSFER_KEYS, "transfer")
    if raw.get("multiworld") is not None:
        _reject_unknown(raw["multiworld"], MULTIWORLD_KEYS, "multiworld")
    if raw.get("ablation") is not None:
        _reject_unknown(raw["ablation"], ABLATION_KEYS, "ablation")
    for field_name in ("trials", "seed", "max_steps"):
        if field_name in raw and not isinstance(raw[field_name], int):
            raise ConfigError("must be an integer", field=field_name)
    return ExperimentConfig(
        runner=raw.get("runner", "run"),
        environment=raw["environment"],
        agents=agents,
        backend=backend,
        trials=raw.get("trials", 1),
        seed=raw.get("seed", 0),
        max_steps=raw.get("max_steps", 100_000),
        out=raw.get("out"),
        transfer=raw.get("transfer"),
        multiworld=raw.get("multiworld"),
        ablation=raw.get("ablation"),
    )


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class BundleWriter:
    """Collects bundle files and writes the manifest last."""

    def __init__(self, out_dir: Path, config_bytes: bytes, seed: int):
        self.out_dir = out_dir
        self.config_hash = _sha256(config_bytes)
        self.seed = seed
        self.started_at = dt.datetime.now(dt.timezone.utc).isoformat()
        self.files: dict[str, str] = {}
        out_dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> None:
        data = text.encode("utf-8")
        (self.out_dir / name).write_bytes(data)
        self.files[name] = _sha256(data)

    def finalize(self) -> None:
        manifest = {
            "config_sha256": self.config_hash,
            "code_version": __version__,
            "seed": self.seed,
            "started_at": self.started_at,
            "finished_at": dt.datetime.now(dt.timezone.utc).isoformat(),
            "files": [{"name": name, "sha256": digest} for name, digest in sorted(self.files.items())],
        }
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _env_metrics_csv(env, log: EpisodeLog) -> str:
    if isinstance(env, MarketEnv):
        return session_metrics_csv(log.records)
    if isinstance(env, EconomyEnv):
        return env.indicators_csv()
    lines = ["metric,value"]
    for name, value in sorted(env.metrics().items()):
        lines.append(f"{name},{value}")
    return "\n".join(lines) + "\n"


def _summary_lines(title: str, pairs: dict[str, Any]) -> str:
    lines = [title]
    for name, value in pairs.items():
        lines.append(f"  {name}: {value}")
    return "\n".join(lines) + "\n"


def _cmd_run(config: ExperimentConfig, bundle: BundleWriter) -> None:
    env, agents = build_setup(config, config.seed)
    log = run_episode(env, agents, max_steps=config.max_steps, seed=config.seed)
    bundle.write("events.jsonl", log.to_jsonl())
    bundle.write("metrics.csv", _env_metrics_csv(env, log))
    summary = _summary_lines(
        f"run: {config.environment['kind']} environment",
        {"seed": config.seed, "steps": log.steps_executed, **env.metrics()},
    )
    if isinstance(env, EconomyEnv) and len(env.indicators) >= 3:
        summary += phillips_okun_report(env.indicators)
    bundle.write("summary.txt", summary)


def _cmd_trials(config: ExperimentConfig, bundle: BundleWriter) -> None:
    result = run_trials(config)
    bundle.write("events.jsonl", "".join(log.to_jsonl() for log in result.logs))
    bundle.write("metrics.csv", result.to_csv())
    means, stds = result.summary()
    summary = _summary_lines(
        f"trials: {config.trials} runs of {config.environment['kind']}",
        {
            "seeds": f"{config.seed}..{config.seed + config.trials - 1}",
            "failures": len(result.failures),
            **{f"mean_{k}": v for k, v in means.items()},
            **{f"stddev_{k}": v for k, v in stds.items()},
        },
    )
    bundle.write("summary.txt", summary)


def _load_items_spec(spec: Any, field: str):
    if isinstance(spec, str):
        item_path = Path(spec)
        if not item_path.exists():
            raise ConfigError(f"item bank not found: {spec}", field=field)
        return load_item_bank(item_path.read_text())
    if isinstance(spec, list):
        return load_item_bank("\n".join(json.dumps(i) for i in spec))
    raise ConfigError("items must be a file path or an inline list", field=field)


def _cmd_transfer(config: ExperimentConfig, bundle: BundleWriter) -> None:
    section = config.transfer or {}
    if "source" not in section or "items" not in section:
        raise ConfigError("transfer needs source and items", field="transfer")
    items = _load_items_spec(section["items"], "transfer.items")
    backend = build_backend(config.backend)
    source_spec = section["source"]

    def agent_factory(aid, memory):
        roster = build_agents(config.agents, backend, aid + 1, world_tag="transfer")
        agent = roster[aid]
        agent.memory = memory
        return agent

    probe_env = build_environment(source_spec, config.seed)
    from .runners import _agent_count
    from .memory import memory_from_spec

    n = _agent_count(probe_env)
    plan = TransferPlan(
        source_env_factory=lambda seed: build_environment(source_spec, seed),
        agent_ids=list(range(n)),
        agent_factory=agent_factory,
        memory_factory=lambda: memory_from_spec(config.agents.get("memory", {"kind": "buffer", "capacity": 100})),
        source_steps=section.get("source_steps", config.max_steps),
        carry_memory=section.get("carry_memory", True),
        seed=config.seed,
        phase2_seed=section.get("phase2_seed", config.seed),
    )
    result = run_memory_transfer(plan, InstrumentSpec(items=items))
    lines = ["pair,diff,t,p,df"]
    for pair in sorted(result.diffs_by_pair):
        stats = result.t_tests.get(pair)
        if stats is None:
            lines.append(f"{pair},{result.diffs_by_pair[pair]},,,")
        else:
            lines.append(f"{pair},{result.diffs_by_pair[pair]},{stats[0]},{stats[1]},{stats[2]}")
    bundle.write("metrics.csv", "\n".join(lines) + "\n")
    bundle.write("events.jsonl", "")
    bundle.write(
        "summary.txt",
        _summary_lines("memory transfer: carry minus fresh bias per pair", result.diffs_by_pair),
    )


def _cmd_multiworld(config: ExperimentConfig, bundle: BundleWriter) -> None:
    section = config.multiworld or {}
    if "environments" not in section:
        raise ConfigError("multiworld needs environments", field="multiworld.environments")
    envs = [build_environment(spec, config.seed) for spec in section["environments"]]
    backend = build_backend(config.backend)
    n = max(_agent_roster(env) for env in envs)
    agents = build_agents(config.agents, backend, n, world_tag=envs[0].name)
    log = run_multiworld(
        MultiWorldSchedule(environments=envs, cycles=section.get("cycles", 1)),
        agents,
        seed=config.seed,
    )
    bundle.write("events.jsonl", log.to_jsonl())
    counts: dict[str, int] = {}
    for record in log.records:
        counts[record.info.get("world", "?")] = counts.get(record.info.get("world", "?"), 0) + 1
    lines = ["world,records"]
    for world in sorted(counts):
        lines.append(f"{world},{counts[world]}")
    bundle.write("metrics.csv", "\n".join(lines) + "\n")
    bundle.write(
        "summary.txt",
        _summary_lines(
            f"multiworld: {[e.name for e in envs]} x {section.get('cycles', 1)} cycles",
            {"steps": log.steps_executed, **counts},
        ),
    )


def _agent_roster(env) -> int:
    from .runners import _agent_count

    return _agent_count(env)


def _cmd_ablation(config: ExperimentConfig, bundle: BundleWriter) -> None:
    section = config.ablation or {}
    for required in ("headline", "summary", "news"):
        if required not in section:
            raise ConfigError(f"ablation needs {required}", field=f"ablation.{required}")
    if config.environment.get("kind") != "market":
        raise ConfigError("ablation runs on a market environment", field="environment.kind")
    news = section["news"]
    if isinstance(news, str):
        feed = load_news_feed(Path(news).read_text())
    else:
        import datetime as _dt

        from .envs.market import NewsItem

        feed = [
            NewsItem(date=_dt.date.fromisoformat(n["date"]), headline=n["headline"], body=n.get("body", ""))
            for n in news
        ]
    base_env = build_environment(config.environment, config.seed)
    backend = build_backend(config.backend)
    from .cognition import PersonaConfig
    from .memory import memory_from_spec

    study = TariffStudy(
        base_config=base_env.config,
        headline=section["headline"],
        research_summary=section["summary"],
        news_feed=feed,
        backend_factory=lambda aid: backend,
        persona_factory=lambda aid: PersonaConfig(
            persona_text=config.agents.get("persona_text", "You are a stock trader."),
            extra_directives=list(config.agents.get("extra_directives", [])),
        ),
        memory_factory=lambda: memory_from_spec(config.agents.get("memory", {"kind": "buffer", "capacity": 3})),
        trials=config.trials,
        base_seed=config.seed,
    )
    settings = [AblationSetting(level) for level in section.get("settings", [1, 2, 3, 4])]
    table = run_tariff_ablation(study, settings)
    bundle.write("metrics.csv", table.to_csv())
    bundle.write("events.jsonl", "")
    ratios = {f"setting_{row.setting}": f"A={row.stock_a:.4f} B={row.stock_b:.4f}" for row in table.rows}
    bundle.write("summary.txt", _summary_lines("tariff ablation: mean buy/sell ratios", ratios))


def _cmd_score(config: ExperimentConfig, bundle: BundleWriter, out_dir: Path) -> None:
    events_path = out_dir / "events.jsonl"
    if not events_path.exists():
        raise ConfigError(f"no events.jsonl to score in {out_dir}")
    log = EpisodeLog.from_jsonl(events_path.read_text())
    bundle.files["events.jsonl"] = _sha256(events_path.read_bytes())
    env = build_environment(config.environment, config.seed)
    bundle.write("metrics.csv", _env_metrics_csv(env, log))
    bundle.write(
        "summary.txt",
        _summary_lines(
            f"score: re-scored {len(log.records)} events", {"seed": log.seed, "steps": log.steps_executed}
        ),
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cogsim", description="Multi-agent simulation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        cmd = sub.add_parser(name, help=f"{name} experiment")
        cmd.add_argument("--config", required=True, help="JSON experiment config")
        cmd.add_argument("--seed", type=int, default=None, help="override config seed (default 0)")
        cmd.add_argument("--trials", type=int, default=None, help="override trial count")
        cmd.add_argument("--out", default=None, help="output bundle directory")
        cmd.add_argument(
            "--backend", choices=["scripted", "replay", "remote"], default=None,
            help="override backend kind",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.trials is not None:
            config.trials = args.trials
        if args.out is not None:
            config.out = args.out
        if args.backend is not None:
            config.backend = {**config.backend, "kind": args.backend}
        out_dir = Path(config.out or f"runs/{args.command}")
        bundle = BundleWriter(out_dir, Path(args.config).read_bytes(), config.seed)
        if args.command == "run":
            _cmd_run(config, bundle)
        elif args.command == "trials":
            _cmd_trials(config, bundle)
        elif args.command == "transfer":
            _cmd_transfer(config, bundle)
        elif args.command == "multiworld":
            _cmd_multiworld(config, bundle)
        elif args.command == "ablation":
            _cmd_ablation(config, bundle)
        elif args.command == "score":
            _cmd_score(config, bundle, out_dir)
        bundle.finalize()
    except ConfigError as exc:
        print(f"config error ({args.config}): {exc}", file=sys.stderr)
        return 1
    except (SimulationError, OSError, ValueError, TypeError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(f"wrote bundle: {out_dir}")
    return 0


def console_main() -> None:
    raise SystemExit(main(sys.argv[1:]))


if __name__ == "__main__":
    console_main()

"""Agent/environment contract, message routing, and the episode runner.

The simulation advances in discrete time steps. Each step the environment
emits per-agent observations; agents reply with action envelopes; the
environment applies the full action map as one transition. Tool calls made
while an agent deliberates never advance the clock. Inter-agent
communication is environment-mediated: agents emit :class:`Message` values
and the router delivers them into inboxes on the next observation.
"""

from __future__ import annotations

import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

from .errors import AgentMissing, SchemaViolation, UnknownRecipient
from .schema import ResponseSchema, canonical_json, validate_action

AgentId = int
TimeStep = int


@dataclass(frozen=True)
class Message:
    """One unit of environment-mediated communication.

    ``src_agent_id`` absent means environment-originated; ``dst_agent_id``
    absent means broadcast (delivered to everyone except the sender).
    """

    time: TimeStep
    src_agent_id: AgentId | None
    dst_agent_id: AgentId | None
    payload: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if (
            self.src_agent_id is not None
            and self.dst_agent_id is not None
            and self.src_agent_id == self.dst_agent_id
        ):
            raise ValueError("message src and dst must differ")

    def render(self) -> str:
        src = "env" if self.src_agent_id is None else f"agent {self.src_agent_id}"
        return f"[t={self.time} from {src}] {canonical_json(self.payload)}"


@dataclass(frozen=True)
class ToolSpec:
    """A callable capability advertised to an agent through its observation.

    ``handler`` receives the parsed arguments as keyword args and returns the
    tool result text. Handlers must be read-only with respect to environment
    state; they run between observations without advancing the clock.
    """

    name: str
    description: str
    parameter_schema: ResponseSchema
    handler: Callable[..., str]


@dataclass
class Observation:
    """Per-agent view of the environment for one step.

    ``response_schema`` present means an action is expected this step;
    observe-only observations leave it ``None`` and the runner skips the
    agent's policy.
    """

    agent_id: AgentId
    time: TimeStep
    context_text: str
    inbox: list[Message] = field(default_factory=list)
    tools: list[ToolSpec] = field(default_factory=list)
    response_schema: ResponseSchema | None = None
    reward: float | None = None

    def __post_init__(self):
        names = [tool.name for tool in self.tools]
        if len(names) != len(set(names)):
            raise ValueError("tool names must be unique within one observation")


@dataclass
class ActionEnvelope:
    """A validated action body plus any outgoing messages."""

    agent_id: AgentId
    time: TimeStep
    body: dict[str, Any]
    outgoing_messages: list[Message] = field(default_factory=list)

    def __post_init__(self):
        for msg in self.outgoing_messages:
            if msg.src_agent_id != self.agent_id:
                raise ValueError("outgoing messages must carry the acting agent as src")


@dataclass(frozen=True)
class EventRecord:
    """One append-only simulation log line."""

    user_id: AgentId
    current_time: TimeStep
    action: str
    info: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return canonical_json(
            {
                "user_id": self.user_id,
                "current_time": self.current_time,
                "action": self.action,
                "info": self.info,
            }
        )


class EventLog:
    """Single-writer append channel for :class:`EventRecord`.

    Records are totally ordered by append position; the environment must
    append with non-decreasing ``current_time``.
    """

    def __init__(self):
        self._records: list[EventRecord] = []
        self._lock = threading.Lock()

    def append(self, user_id: AgentId, current_time: TimeStep, action: str, info: dict[str, Any] | None = None) -> EventRecord:
        record = EventRecord(user_id=user_id, current_time=current_time, action=action, info=dict(info or {}))
        with self._lock:
            self._records.append(record)
        return record

    def __len__(self) -> int:
        return len(self._records)

    def snapshot(self, start: int = 0) -> list[EventRecord]:
        with self._lock:
            return list(self._records[start:])


class Environment(ABC):
    """Reset/step/done state machine owning the global simulation state.

    ``step`` is the only mutator of environment state; ``done()`` is
    monotone until the next ``reset``. Simultaneous actions are applied in
    ascending agent id so replays are deterministic.
    """

    name: str = "env"

    def __init__(self):
        self.events = EventLog()

    @abstractmethod
    def reset(self) -> dict[AgentId, Observation]:
        """Reinitialize state and return the first observations."""

    @abstractmethod
    def step(self, actions: Mapping[AgentId, ActionEnvelope]) -> dict[AgentId, Observation]:
        """Apply one joint action map and return the next observations."""

    @abstractmethod
    def done(self) -> bool:
        """True once the episode has ended; stays true until reset."""

    def metrics(self) -> dict[str, float]:
        """Scalar summary of the finished episode, for experiment tables."""
        return {}


@dataclass
class EpisodeLog:
    """Everything produced by one episode: events, reward totals, seed."""

    records: list[EventRecord]
    total_rewards: dict[AgentId, float]
    seed: int
    steps_executed: int

    def to_jsonl(self) -> str:
        """Newline-delimited JSON: one line per record plus a trailing summary."""
        lines = [record.to_json() for record in self.records]
        summary = {
            "summary": {
                "seed": self.seed,
                "steps_executed": self.steps_executed,
                "total_rewards": {str(k): v for k, v in sorted(self.total_rewards.items())},
            }
        }
        lines.append(canonical_json(summary))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "EpisodeLog":
        import json as _json

        records: list[EventRecord] = []
        summary: dict[str, Any] = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = _json.loads(line)
            if "summary" in obj:
                summary = obj["summary"]
            else:
                records.append(
                    EventRecord(
                        user_id=obj["user_id"],
                        current_time=obj["current_time"],
                        action=obj["action"],
                        info=obj["info"],
                    )
                )
        return EpisodeLog(
            records=records,
            total_rewards={int(k): v for k, v in summary.get("total_rewards", {}).items()},
            seed=summary.get("seed", 0),
            steps_executed=summary.get("steps_executed", 0),
        )


def route_messages(
    outbox: Iterable[Message], population: set[AgentId]
) -> dict[AgentId, list[Message]]:
    """Deliver an outbox into per-agent inboxes.

    Unicast goes to exactly the named recipient; broadcast (no dst) goes to
    every agent except the sender. Inbox order preserves outbox order.
    """
    inboxes: dict[AgentId, list[Message]] = {aid: [] for aid in population}
    for msg in outbox:
        if msg.dst_agent_id is not None:
            if msg.dst_agent_id not in population:
                raise UnknownRecipient(f"message to unknown agent {msg.dst_agent_id}")
            inboxes[msg.dst_agent_id].append(msg)
        else:
            for aid in sorted(population):
                if aid != msg.src_agent_id:
                    inboxes[aid].append(msg)
    return inboxes


def _invoke_policy(policy: Any, obs: Observation) -> ActionEnvelope:
    step = getattr(policy, "step", None)
    if callable(step):
        return step(obs)
    return policy(obs)


def run_episode(
    env: Environment,
    agents: Mapping[AgentId, Any],
    max_steps: int,
    seed: int = 0,
    parallel: bool = False,
) -> EpisodeLog:
    """Run one episode: observe, act, step, until done or ``max_steps``.

    Policies are objects with ``step(obs) -> ActionEnvelope`` (or bare
    callables). Observations without a response schema are observe-only and
    skip the policy. Rewards are accumulated from post-step observations.
    With ``parallel=True`` policy calls within a step fan out to a thread
    pool; results are still applied in ascending agent id.
    """
    if max_steps < 0:
        raise ValueError("max_steps must be >= 0")
    total_rewards: dict[AgentId, float] = {aid: 0.0 for aid in agents}
    observations = env.reset()
    steps = 0
    while not env.done() and steps < max_steps:
        pending: list[tuple[AgentId, Observation]] = []
        for aid in sorted(observations):
            obs = observations[aid]
            if obs.response_schema is None:
                continue
            if aid not in agents:
                raise AgentMissing(f"actionable observation for unknown agent {aid}")
            pending.append((aid, obs))

        actions: dict[AgentId, ActionEnvelope] = {}
        if parallel and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=min(len(pending), 16)) as pool:
                futures = {aid: pool.submit(_invoke_policy, agents[aid], obs) for aid, obs in pending}
            for aid, _ in pending:
                actions[aid] = futures[aid].result()
        else:
            for aid, obs in pending:
                actions[aid] = _invoke_policy(agents[aid], obs)

        for (aid, obs) in pending:
            violations = validate_action(actions[aid].body, obs.response_schema)
            if violations:
                raise SchemaViolation(f"agent {aid} action failed validation", violations)

        observations = env.step(actions)
        steps += 1
        for aid, obs in observations.items():
            if obs.reward is not None and aid in total_rewards:
                total_rewards[aid] += obs.reward
    return EpisodeLog(
        records=env.events.snapshot(),
        total_rewards=total_rewards,
        seed=seed,
        steps_executed=steps,
    )

"""Agent-side policy: persona config + memory + prompt assembly + backend pipeline.

One agent step composes a prompt from its observation, runs the tool loop,
parses the final text into a schema-valid body, and records what happened
into memory. However many tools the agent calls, the environment clock
does not move until the action envelope is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .backends import ChatTurn, CompletionBackend, parse_structured, run_tool_loop
from .errors import ContractViolation
from .memory import MemoryEntry, MemoryStore, NullMemory
from .protocol import ActionEnvelope, Observation
from .schema import canonical_json


@dataclass
class PersonaConfig:
    """Static identity: persona text plus ordered extra directives."""

    persona_text: str = ""
    role_tag: str = ""
    extra_directives: list[str] = field(default_factory=list)

    def render(self) -> str:
        parts = [self.persona_text] if self.persona_text else []
        parts.extend(self.extra_directives)
        return "\n".join(parts)


@dataclass
class PromptBundle:
    """The four prompt sections, always in this order."""

    system_text: str
    memory_text: str
    observation_text: str
    schema_hint: str

    def as_turns(self) -> list[ChatTurn]:
        user_parts = []
        if self.memory_text:
            user_parts.append("Your memory:\n" + self.memory_text)
        user_parts.append(self.observation_text)
        if self.schema_hint:
            user_parts.append("Respond with a JSON object with fields:\n" + self.schema_hint)
        turns = []
        if self.system_text:
            turns.append(ChatTurn(role="system", content=self.system_text))
        turns.append(ChatTurn(role="user", content="\n\n".join(user_parts)))
        return turns

    def full_text(self) -> str:
        return "\n\n".join(
            part
            for part in (self.system_text, self.memory_text, self.observation_text, self.schema_hint)
            if part
        )


def compose_prompt(obs: Observation, cfg: PersonaConfig, mem: MemoryStore) -> PromptBundle:
    """Assemble the prompt sections for one observation."""
    observation_lines = [obs.context_text] if obs.context_text else []
    for msg in obs.inbox:
        observation_lines.append(msg.render())
    return PromptBundle(
        system_text=cfg.render(),
        memory_text=mem.render(),
        observation_text="\n".join(observation_lines),
        schema_hint=obs.response_schema.hint_text() if obs.response_schema else "",
    )


def agent_step(
    obs: Observation,
    cfg: PersonaConfig,
    mem: MemoryStore,
    backend: CompletionBackend,
    world_tag: str = "world",
    parser_backend: CompletionBackend | None = None,
    max_tool_rounds: int = 5,
    max_parse_retries: int = 2,
    model_id: str = "scripted",
    temperature: float = 0.0,
) -> ActionEnvelope:
    """Run one full decision: prompt, tool loop, structured parse, memory writes.

    Requires an actionable observation (``response_schema`` present). Tool
    failures surface as error-text results in memory and keep the step
    alive; parse failures propagate.
    """
    if obs.response_schema is None:
        raise ContractViolation("agent_step requires an observation with a response schema")
    bundle = compose_prompt(obs, cfg, mem)
    mem.record(MemoryEntry(time=obs.time, world_tag=world_tag, role="observation", content=obs.context_text))
    final_text, trace = run_tool_loop(
        backend,
        bundle.as_turns(),
        obs.tools,
        max_rounds=max_tool_rounds,
        model_id=model_id,
        temperature=temperature,
    )
    for call, result_text in trace:
        mem.record(
            MemoryEntry(
                time=obs.time,
                world_tag=world_tag,
                role="tool_result",
                content=f"{call.name}: {result_text}",
            )
        )
    body = parse_structured(
        final_text,
        obs.response_schema,
        parser_backend or backend,
        max_retries=max_parse_retries,
        temperature=temperature,
        model_id=model_id,
    )
    mem.record(MemoryEntry(time=obs.time, world_tag=world_tag, role="own_action", content=canonical_json(body)))
    return ActionEnvelope(agent_id=obs.agent_id, time=obs.time, body=body)


class Agent:
    """Binds an id to its persona, memory, and backend; one agent per pair."""

    def __init__(
        self,
        agent_id: int,
        config: PersonaConfig | None = None,
        memory: MemoryStore | None = None,
        backend: CompletionBackend | None = None,
        world_tag: str = "world",
        parser_backend: CompletionBackend | None = None,
        max_tool_rounds: int = 5,
        max_parse_retries: int = 2,
        model_id: str = "scripted",
        temperature: float = 0.0,
    ):
        if backend is None:
            raise ValueError("agent requires a completion backend")
        self.agent_id = agent_id
        self.config = config or PersonaConfig()
        self.memory = memory or NullMemory()
        self.backend = backend
        self.world_tag = world_tag
        self.parser_backend = parser_backend
        self.max_tool_rounds = max_tool_rounds
        self.max_parse_retries = max_parse_retries
        self.model_id = model_id
        self.temperature = temperature

    def step(self, obs: Observation) -> ActionEnvelope:
        return agent_step(
            obs,
            self.config,
            self.memory,
            self.backend,
            world_tag=self.world_tag,
            parser_backend=self.parser_backend,
            max_tool_rounds=self.max_tool_rounds,
            max_parse_retries=self.max_parse_retries,
            model_id=self.model_id,
            temperature=self.temperature,
        )

"""Agent memory stores: the dynamic internal state carried across steps and worlds.

Every store keeps the full append-only archive; capacity, window, and token
limits only restrict what ``render()`` shows. The archive is what transfers
between environments, tagged per entry with the world it came from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
ENTRY_ROLES = ("observation", "own_action", "tool_result", "note")


def estimate_tokens(text: str) -> int:
    """Cheap deterministic token estimate: ceil(len/4)."""
    return (len(text) + 3) // 4


@dataclass(frozen=True)
class MemoryEntry:
    """One immutable memory line: when, where, what kind, and the content."""

    time: int
    world_tag: str
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ENTRY_ROLES:
            raise ValueError(f"unknown memory role {self.role!r}")

    def render(self) -> str:
        return f"[{self.world_tag} t={self.time} {self.role}] {self.content}"


class MemoryStore:
    """Base store: archives everything, renders nothing by itself."""

    variant = "null"

    def __init__(self):
        self.entries: list[MemoryEntry] = []

    def record(self, entry: MemoryEntry) -> None:
        self.entries.append(entry)

    def visible(self) -> list[MemoryEntry]:
        """Entries that survive the store's rendering policy, oldest first."""
        return []

    def render(self) -> str:
        return "\n".join(entry.render() for entry in self.visible())

    def _params(self) -> dict:
        return {}

    def to_jsonl(self) -> str:
        """Versioned archive: a header line, then one entry per line."""
        header = {"version": 1, "variant": self.variant}
        header.update(self._params())
        lines = [json.dumps(header, sort_keys=True)]
        for entry in self.entries:
            lines.append(
                json.dumps(
                    {
                        "time": entry.time,
                        "world_tag": entry.world_tag,
                        "role": entry.role,
                        "content": entry.content,
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "MemoryStore":
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise ValueError("empty memory archive")
        header = json.loads(lines[0])
        variant = header.get("variant")
        if variant == "null":
            store: MemoryStore = NullMemory()
        elif variant == "buffer":
            store = BufferMemory(capacity=header["capacity"])
        elif variant == "chat_history":
            store = ChatHistoryMemory(window=header["window"], token_limit=header["token_limit"])
        else:
            raise ValueError(f"unknown memory variant {variant!r}")
        for line in lines[1:]:
            obj = json.loads(line)
            store.record(
                MemoryEntry(
                    time=obj["time"],
                    world_tag=obj["world_tag"],
                    role=obj["role"],
                    content=obj["content"],
                )
            )
        return store


class NullMemory(MemoryStore):
    """Archives entries but never renders any."""

    variant = "null"


class BufferMemory(MemoryStore):
    """Renders at most the ``capacity`` most recent entries."""

    variant = "buffer"

    def __init__(self, capacity: int):
        super().__init__()
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity

    def visible(self) -> list[MemoryEntry]:
        if self.capacity == 0:
            return []
        return self.entries[-self.capacity:]

    def _params(self) -> dict:
        return {"capacity": self.capacity}


class ChatHistoryMemory(MemoryStore):
    """Renders at most ``window`` entries and ~``token_limit`` content tokens.

    Packing is greedy from the newest entry backwards, dropping oldest
    first. The newest entry always renders (window permitting) even when it
    alone exceeds the token budget; otherwise an oversized latest entry
    would blank the whole memory.
    """

    variant = "chat_history"

    def __init__(self, window: int, token_limit: int):
        super().__init__()
        if window < 0 or token_limit < 0:
            raise ValueError("window and token_limit must be >= 0")
        self.window = window
        self.token_limit = token_limit

    def visible(self) -> list[MemoryEntry]:
        survivors: list[MemoryEntry] = []
        tokens = 0
        for entry in reversed(self.entries):
            if len(survivors) >= self.window:
                break
            cost = estimate_tokens(entry.content)
            if survivors and tokens + cost > self.token_limit:
                break
            survivors.append(entry)
            tokens += cost
        survivors.reverse()
        return survivors

    def _params(self) -> dict:
        return {"window": self.window, "token_limit": self.token_limit}


def record(store: MemoryStore, entry: MemoryEntry) -> MemoryStore:
    """Append ``entry`` to the store's archive (function form of ``store.record``)."""
    store.record(entry)
    return store


def render_memory(store: MemoryStore) -> str:
    """Render the store's surviving entries, one line each, oldest first."""
    return store.render()


def memory_from_spec(spec: dict) -> MemoryStore:
    """Build a store from a config fragment like ``{"kind": "buffer", "capacity": 3}``."""
    kind = spec.get("kind", "null")
    if kind == "null":
        return NullMemory()
    if kind == "buffer":
        return BufferMemory(capacity=spec["capacity"])
    if kind == "chat_history":
        return ChatHistoryMemory(window=spec["window"], token_limit=spec["token_limit"])
    raise ValueError(f"unknown memory kind {kind!r}")

"""Trace logs and their interpretation into quantified flow events.

A trace file is UTF-8 JSON lines. The optional first line is a header
object carrying ``sample_id``, ``label`` and ``family`` (and optionally
``background_pids``, processes that belong to the sandbox rather than the
sample). Every other line is one monitored call::

    {"sample_id": "s1", "label": "malicious", "family": "cleaman"}
    {"ts": 10, "pid": 4, "process": "a.exe", "api": "ReadFile", "args": {...}}

Interpretation is driven by a declarative mapping table (``data/mappings.json``)
so new calls can be taught to the interpreter without touching code.
"""

from __future__ import annotations

import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import IO, Any, Iterable, Mapping

log = logging.getLogger(__name__)


class EntityType(str, Enum):
    PROCESS = "P"
    FILE = "F"
    SOCKET = "S"
    URL = "U"
    REGISTRY = "R"

    @classmethod
    def parse(cls, value: str) -> "EntityType":
        """Accept either the display letter ("F") or the long name ("File")."""
        try:
            return cls(value.upper())
        except ValueError:
            pass
        try:
            return cls[value.upper()]
        except KeyError:
            raise ValueError(f"unknown entity type {value!r}") from None

    def __str__(self) -> str:
        return self.value


class Label(str, Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"
    UNKNOWN = "unknown"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, order=True)
class EntityRef:
    """Node identity: two refs with equal (kind, name) are the same node."""

    kind: EntityType
    name: str

    def __post_init__(self) -> None:
        if not isinstance(self.kind, EntityType):
            object.__setattr__(self, "kind", EntityType.parse(self.kind))
        if not self.name:
            raise ValueError("entity name must be non-empty")

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.name}"

    @classmethod
    def parse(cls, text: str) -> "EntityRef":
        kind, sep, name = text.partition(":")
        if not sep:
            raise ValueError(f"not an entity reference: {text!r}")
        return cls(EntityType.parse(kind), name)

    @classmethod
    def process(cls, name: str, pid: int) -> "EntityRef":
        return cls(EntityType.PROCESS, f"{name}:{pid}")


@dataclass(frozen=True)
class RawEvent:
    ts: int
    pid: int
    process: str
    api: str
    args: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.api:
            raise ValueError("api must be non-empty")
        if not 0 <= self.ts < 2**64:
            raise ValueError(f"timestamp out of range: {self.ts}")

    def to_json(self) -> dict[str, Any]:
        return {
            "ts": self.ts,
            "pid": self.pid,
            "process": self.process,
            "api": self.api,
            "args": dict(self.args),
        }


@dataclass(frozen=True)
class FlowEvent:
    src: EntityRef
    dst: EntityRef
    size: int
    t: int
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError(f"flow size must be >= 1, got {self.size}")
        if self.src == self.dst:
            raise ValueError(f"self-flow on {self.src}")


@dataclass
class TraceLog:
    sample_id: str
    label: Label = Label.UNKNOWN
    family: str | None = None
    events: list[RawEvent] = field(default_factory=list)
    background_pids: frozenset[int] = frozenset()

    def header(self) -> dict[str, Any]:
        h: dict[str, Any] = {
            "sample_id": self.sample_id,
            "label": self.label.value,
            "family": self.family,
        }
        if self.background_pids:
            h["background_pids"] = sorted(self.background_pids)
        return h

    def calls(self, include_background: bool = False) -> list[str]:
        """Api names in trace order, the token sequence used by n-grams."""
        if include_background or not self.background_pids:
            return [e.api for e in self.events]
        return [e.api for e in self.events if e.pid not in self.background_pids]

    def process_label(self, pid: int) -> Label:
        if pid in self.background_pids:
            return Label.BENIGN
        return self.label


class TraceParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class TraceOrderWarning(UserWarning):
    pass


class InterpretationError(ValueError):
    def __init__(self, msg: str, index: int | None = None, api: str | None = None):
        where = f"event {index} ({api})" if index is not None else (api or "event")
        super().__init__(f"{where}: {msg}")
        self.reason = msg
        self.index = index
        self.api = api


_EVENT_FIELDS = ("ts", "pid", "process", "api", "args")


def _event_from_obj(obj: Any, lineno: int) -> RawEvent:
    if not isinstance(obj, dict):
        raise TraceParseError(lineno, "record is not a JSON object")
    missing = [k for k in _EVENT_FIELDS if k not in obj]
    if missing:
        raise TraceParseError(lineno, f"missing field(s): {', '.join(missing)}")
    ts, pid = obj["ts"], obj["pid"]
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise TraceParseError(lineno, "ts must be an integer")
    if not isinstance(pid, int) or isinstance(pid, bool):
        raise TraceParseError(lineno, "pid must be an integer")
    if not isinstance(obj["process"], str) or not isinstance(obj["api"], str):
        raise TraceParseError(lineno, "process and api must be strings")
    if not isinstance(obj["args"], dict):
        raise TraceParseError(lineno, "args must be an object")
    try:
        return RawEvent(ts, pid, obj["process"], obj["api"], obj["args"])
    except ValueError as exc:
        raise TraceParseError(lineno, str(exc)) from None


def _is_header(obj: Any) -> bool:
    return isinstance(obj, dict) and "sample_id" in obj and "api" not in obj


def parse_trace_log(stream: IO[bytes] | IO[str] | Iterable[str | bytes]) -> TraceLog:
    """Parse a JSON-lines trace. Out-of-order timestamps are stably re-sorted."""
    trace = TraceLog(sample_id="")
    events: list[RawEvent] = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(lineno, f"invalid JSON ({exc.msg})") from None
        if lineno == 1 and _is_header(obj):
            try:
                trace.sample_id = str(obj["sample_id"])
                trace.label = Label(obj.get("label") or "unknown")
                trace.family = obj.get("family")
                trace.background_pids = frozenset(int(p) for p in obj.get("background_pids", ()))
            except (ValueError, TypeError) as exc:
                raise TraceParseError(lineno, f"bad header: {exc}") from None
            continue
        events.append(_event_from_obj(obj, lineno))

    if any(a.ts > b.ts for a, b in zip(events, events[1:])):
        warnings.warn(
            f"trace {trace.sample_id or '<unnamed>'}: timestamps not monotone, re-sorting",
            TraceOrderWarning,
            stacklevel=2,
        )
        events.sort(key=lambda e: e.ts)
    trace.events = events
    return trace


def read_trace(path: str | Path) -> TraceLog:
    with open(path, "rb") as fh:
        return parse_trace_log(fh)


def dump_trace_log(trace: TraceLog, stream: IO[str]) -> None:
    stream.write(json.dumps(trace.header(), sort_keys=True) + "\n")
    for e in trace.events:
        stream.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def dumps_trace_log(trace: TraceLog) -> str:
    buf = io.StringIO()
    dump_trace_log(trace, buf)
    return buf.getvalue()


def write_trace(trace: TraceLog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        dump_trace_log(trace, fh)


# -- interpretation -----------------------------------------------------------

def _canonical_name(kind: EntityType, name: str) -> str:
    # Windows paths and registry keys are case-insensitive
    if kind is EntityType.FILE:
        return name.replace("/", "\\").lower()
    if kind is EntityType.REGISTRY:
        return name.lower()
    return name


def _size_arg(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError("boolean size")
    if isinstance(value, int):
        size = value
    elif isinstance(value, str) and value.strip().isdigit():
        size = int(value)
    else:
        raise ValueError(f"size is not an integer: {value!r}")
    if size < 0:
        raise ValueError(f"negative size {size}")
    return size


class MappingTable:
    """Declarative api -> flow mapping.

    Each entry names a ``src`` and ``dst`` endpoint and the argument holding
    the transferred byte count. An endpoint is either ``"caller"`` (the issuing
    process) or an object ``{"kind": ..., "arg": ..., "pid_arg": ...}``; with
    ``pid_arg`` the endpoint is a process identified by image name and pid.
    """

    def __init__(self, entries: Mapping[str, Mapping[str, Any]]):
        self.entries = dict(entries)
        for api, entry in self.entries.items():
            for end in ("src", "dst"):
                spec = entry.get(end)
                if spec != "caller" and not (isinstance(spec, dict) and "kind" in spec and "arg" in spec):
                    raise ValueError(f"mapping {api!r}: bad {end} endpoint {spec!r}")
                if isinstance(spec, dict):
                    EntityType.parse(spec["kind"])
            if not isinstance(entry.get("size"), str):
                raise ValueError(f"mapping {api!r}: size must name an argument")

    @classmethod
    def load(cls, path: str | Path) -> "MappingTable":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "MappingTable":
        text = resources.files("qdfg").joinpath("data/mappings.json").read_text(encoding="utf-8")
        return cls(json.loads(text))

    def __contains__(self, api: str) -> bool:
        return api in self.entries

    def _endpoint(self, spec: Any, e: RawEvent) -> EntityRef:
        if spec == "caller":
            return EntityRef.process(e.process, e.pid)
        kind = EntityType.parse(spec["kind"])
        name = e.args.get(spec["arg"])
        if not isinstance(name, str) or not name:
            raise InterpretationError(f"missing or empty argument {spec['arg']!r}", api=e.api)
        if "pid_arg" in spec:
            pid = e.args.get(spec["pid_arg"])
            if isinstance(pid, bool) or not isinstance(pid, int):
                raise InterpretationError(f"missing integer argument {spec['pid_arg']!r}", api=e.api)
            return EntityRef(kind, f"{name}:{pid}")
        return EntityRef(kind, _canonical_name(kind, name))

    def interpret(self, e: RawEvent) -> FlowEvent | None:
        entry = self.entries.get(e.api)
        if entry is None:
            return None
        size_key = entry["size"]
        if size_key not in e.args:
            raise InterpretationError(f"missing size argument {size_key!r}", api=e.api)
        try:
            size = _size_arg(e.args[size_key])
        except ValueError as exc:
            raise InterpretationError(str(exc), api=e.api) from None
        if size == 0:
            return None
        src = self._endpoint(entry["src"], e)
        dst = self._endpoint(entry["dst"], e)
        if src == dst:
            # a process touching its own memory moves no data between entities
            return None
        return FlowEvent(src, dst, size, e.ts)


_default_table: MappingTable | None = None


def default_table() -> MappingTable:
    global _default_table
    if _default_table is None:
        _default_table = MappingTable.default()
    return _default_table


def interpret_event(e: RawEvent, table: MappingTable | None = None) -> FlowEvent | None:
    return (table or default_table()).interpret(e)


def interpret_log(trace: TraceLog, table: MappingTable | None = None) -> list[FlowEvent]:
    table = table or default_table()
    flows = []
    for i, e in enumerate(trace.events):
        try:
            fe = table.interpret(e)
        except InterpretationError as exc:
            raise InterpretationError(exc.reason, index=i, api=e.api) from None
        if fe is not None:
            flows.append(fe)
    return flows

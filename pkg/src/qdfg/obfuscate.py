"""Behavioral obfuscation of traces: call reordering and bogus-call injection.

The degree of obfuscation is measured as the Levenshtein distance between the
api-name sequences of the original and the obfuscated trace.
"""

from __future__ import annotations

import itertools
import json
import random
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Hashable, Iterable, Sequence

from .trace import RawEvent, TraceLog

_TEMP = "C:\\Users\\user\\AppData\\Local\\Temp\\"

# Benign-looking no-flow calls, plus two flow-bearing entries that touch a
# fresh temp file per injection ("{uid}") so injected calls can add new nodes.
DEFAULT_BOGUS_POOL: tuple[dict[str, Any], ...] = (
    {"api": "GetCursorPos", "args": {}},
    {"api": "PeekMessage", "args": {}},
    {"api": "DispatchMessage", "args": {}},
    {"api": "GetSystemMetrics", "args": {}},
    {"api": "GetForegroundWindow", "args": {}},
    {"api": "InvalidateRect", "args": {}},
    {"api": "RegOpenKey", "args": {"Key": "HKCU\\Control Panel\\Desktop"}},
    {"api": "WriteFile", "args": {"FileName": _TEMP + "~df{uid}.tmp", "ToWriteBytes": 512}},
    {"api": "ReadFile", "args": {"FileName": _TEMP + "~df{uid}.tmp", "ToReadBytes": 512}},
)


class ObfuscationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ObfuscationConfig:
    reorder_prob: float = 0.0
    reorder_window: int = 2
    inject_prob: float = 0.0
    inject_max: int = 1
    bogus_pool: tuple[dict[str, Any], ...] = DEFAULT_BOGUS_POOL
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.reorder_prob <= 1.0 and 0.0 <= self.inject_prob <= 1.0):
            raise ObfuscationConfigError("probabilities must lie in [0, 1]")
        if self.reorder_window < 2:
            raise ObfuscationConfigError("reorder_window must be >= 2")
        if self.inject_max < 0:
            raise ObfuscationConfigError("inject_max must be >= 0")
        if self.inject_prob > 0 and (not self.bogus_pool or self.inject_max == 0):
            raise ObfuscationConfigError("injection needs a non-empty bogus pool and inject_max >= 1")
        for t in self.bogus_pool:
            if not isinstance(t, dict) or not isinstance(t.get("api"), str) or not t["api"]:
                raise ObfuscationConfigError(f"bad bogus template {t!r}")
            if not isinstance(t.get("args", {}), dict):
                raise ObfuscationConfigError(f"bogus template args must be an object: {t!r}")

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["bogus_pool"] = list(self.bogus_pool)
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ObfuscationConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ObfuscationConfigError(f"unknown option(s): {', '.join(sorted(unknown))}")
        if "bogus_pool" in d:
            d["bogus_pool"] = tuple(d["bogus_pool"])
        return cls(**d)


def _rng(cfg: ObfuscationConfig, trace: TraceLog, stage: str) -> random.Random:
    # per-sample substream: the same config perturbs different samples differently
    return random.Random(f"{cfg.seed}:{trace.sample_id}:{stage}")


def reorder(trace: TraceLog, cfg: ObfuscationConfig) -> TraceLog:
    """Randomly swap events forward within ``reorder_window``; timestamps stay in slot order."""
    events = list(trace.events)
    if cfg.reorder_prob > 0 and len(events) > 1:
        rng = _rng(cfg, trace, "reorder")
        n = len(events)
        for i in range(n - 1):
            if rng.random() < cfg.reorder_prob:
                j = rng.randint(i + 1, min(n - 1, i + cfg.reorder_window))
                events[i], events[j] = events[j], events[i]
    slots = [e.ts for e in trace.events]
    events = [replace(e, ts=ts) if e.ts != ts else e for e, ts in zip(events, slots)]
    return replace(trace, events=events)


def _instantiate(template: dict[str, Any], uid: int, host: RawEvent, ts: int) -> RawEvent:
    args = {
        k: v.replace("{uid}", str(uid)) if isinstance(v, str) else v
        for k, v in template.get("args", {}).items()
    }
    return RawEvent(ts, host.pid, host.process, template["api"], args)


def inject_bogus(trace: TraceLog, cfg: ObfuscationConfig) -> TraceLog:
    """Insert 1..inject_max pool calls after each event with probability ``inject_prob``.

    Injected calls are issued by the process of the preceding original event,
    with timestamps interpolated up to the next original event.
    """
    if cfg.inject_prob <= 0 or not trace.events:
        return replace(trace, events=list(trace.events))
    rng = _rng(cfg, trace, "inject")
    uid = itertools.count()
    out: list[RawEvent] = []
    events = trace.events
    for i, e in enumerate(events):
        out.append(e)
        if rng.random() >= cfg.inject_prob:
            continue
        m = rng.randint(1, cfg.inject_max)
        nxt = events[i + 1].ts if i + 1 < len(events) else e.ts
        for j in range(1, m + 1):
            ts = e.ts + (nxt - e.ts) * j // (m + 1)
            out.append(_instantiate(rng.choice(cfg.bogus_pool), next(uid), e, ts))
    return replace(trace, events=out)


def obfuscate(trace: TraceLog, cfg: ObfuscationConfig) -> TraceLog:
    return inject_bogus(reorder(trace, cfg), cfg)


# -- obfuscation degree -------------------------------------------------------

def levenshtein_dp(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Textbook two-row dynamic program, unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def levenshtein(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Edit distance over token sequences.

    Same dynamic program as :func:`levenshtein_dp`, evaluated one column at a
    time with the vertical deltas packed into an integer bit vector, which is
    what makes whole-trace comparisons affordable.
    """
    if len(a) < len(b):
        a, b = b, a
    m = len(b)
    if m == 0:
        return len(a)
    # b (shorter) is the bit-packed pattern; a is streamed
    peq: dict[Hashable, int] = {}
    for i, tok in enumerate(b):
        peq[tok] = peq.get(tok, 0) | (1 << i)
    full = (1 << m) - 1
    top = 1 << (m - 1)
    pv, mv, score = full, 0, m
    for tok in a:
        eq = peq.get(tok, 0)
        xv = eq | mv
        xh = (((eq & pv) + pv) ^ pv) | eq
        ph = mv | ~(xh | pv)
        mh = pv & xh
        if ph & top:
            score += 1
        elif mh & top:
            score -= 1
        ph = (ph << 1) | 1
        mh <<= 1
        pv = (mh | ~(xv | ph)) & full
        mv = ph & xv & full
    return score


def obfuscation_degree(originals: Sequence[TraceLog], obfuscated: Sequence[TraceLog]) -> float:
    """Mean api-sequence Levenshtein distance between paired traces."""
    if len(originals) != len(obfuscated):
        raise ValueError("trace lists differ in length")
    if not originals:
        return 0.0
    total = sum(levenshtein(a.calls(True), b.calls(True)) for a, b in zip(originals, obfuscated))
    return total / len(originals)


# -- sweep grids -------------------------------------------------------------

def obfuscation_grid(
    reorder_probs: Iterable[float] = (0.0,),
    reorder_windows: Iterable[int] = (2,),
    inject_probs: Iterable[float] = (0.0,),
    inject_maxes: Iterable[int] = (1,),
    seed: int = 0,
    bogus_pool: tuple[dict[str, Any], ...] = DEFAULT_BOGUS_POOL,
) -> list[ObfuscationConfig]:
    """Cartesian product of settings, with duplicate no-op combinations dropped."""
    seen: set[tuple] = set()
    grid = []
    for rp, rw, ip, im in itertools.product(reorder_probs, reorder_windows, inject_probs, inject_maxes):
        key = (rp, rw if rp > 0 else 2, ip, im if ip > 0 else 1)
        if key in seen:
            continue
        seen.add(key)
        grid.append(ObfuscationConfig(rp, key[1], ip, key[3], bogus_pool, seed))
    return grid


def load_grid(path: str | Path) -> list[ObfuscationConfig]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        doc = doc.get("configs", [])
    return [ObfuscationConfig.from_json(d) for d in doc]


def dump_grid(grid: Sequence[ObfuscationConfig], path: str | Path) -> None:
    Path(path).write_text(json.dumps([c.to_json() for c in grid], indent=2, sort_keys=True) + "\n", encoding="utf-8")


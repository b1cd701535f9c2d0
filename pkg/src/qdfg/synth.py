"""Synthetic, family-structured trace corpora.

A family is a weighted mix of behavior motifs (self-replication fan-out,
payload download and execution, registry persistence, file encryption sweeps,
process injection, office-style and browser-style I/O ...). A trace is drawn
by repeatedly picking a motif and emitting its call block until the family's
event budget is spent, with the family's rate of unrelated no-flow calls
interleaved. Byte counts come from per-motif log-normal distributions.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

from .trace import Label, RawEvent, TraceLog, write_trace

_USER = "C:\\Users\\user\\"
_PROGRAMS = "C:\\Program Files\\"
_SYSTEM = "C:\\Windows\\System32\\"

BENIGN_NOISE = (
    "GetTickCount", "GetCursorPos", "PeekMessage", "DispatchMessage", "GetSystemMetrics",
    "LoadLibrary", "GetProcAddress", "SetWindowText", "GetForegroundWindow", "InvalidateRect",
)
MALWARE_NOISE = ("IsDebuggerPresent", "GetTickCount", "Sleep", "GetModuleHandle")


@dataclass(frozen=True)
class MotifSpec:
    name: str
    weight: float
    # log-normal parameters (mu, sigma) of ln(bytes)
    size: tuple[float, float] = (8.0, 1.0)


@dataclass(frozen=True)
class FamilySpec:
    name: str
    label: Label
    motifs: tuple[MotifSpec, ...]
    events: tuple[int, int] = (60, 150)
    image: str = "sample.exe"
    noise: float = 0.2

    def __post_init__(self) -> None:
        if not self.motifs:
            raise ValueError(f"family {self.name}: no motifs")
        total = sum(m.weight for m in self.motifs)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"family {self.name}: motif weights sum to {total}, not 1")
        for m in self.motifs:
            if m.name not in MOTIFS:
                raise ValueError(f"family {self.name}: unknown motif {m.name!r}")
            if m.weight < 0 or m.size[0] <= 0 or m.size[1] <= 0:
                raise ValueError(f"family {self.name}: motif {m.name} needs positive parameters")
        lo, hi = self.events
        if not 1 <= lo <= hi:
            raise ValueError(f"family {self.name}: bad event range {self.events}")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError(f"family {self.name}: noise must lie in [0, 1)")

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "FamilySpec":
        motifs = tuple(MotifSpec(m["name"], float(m["weight"]), tuple(m.get("size", (8.0, 1.0))))
                       for m in d["motifs"])
        return cls(d["name"], Label(d["label"]), motifs, tuple(d.get("events", (60, 150))),
                   d.get("image", "sample.exe"), float(d.get("noise", 0.2)))

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "label": self.label.value,
            "image": self.image,
            "events": list(self.events),
            "noise": self.noise,
            "motifs": [{"name": m.name, "weight": m.weight, "size": list(m.size)} for m in self.motifs],
        }


def load_families(path: str | Path | None = None) -> list[FamilySpec]:
    if path is None:
        text = resources.files("qdfg").joinpath("data/default_families.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    doc = json.loads(text)
    if isinstance(doc, dict):
        doc = doc["families"]
    return [FamilySpec.from_json(d) for d in doc]


# -- trace construction ---------------------------------------------------

@dataclass
class _Proc:
    name: str
    pid: int


@dataclass
class _Builder:
    rng: random.Random
    family: FamilySpec
    main: _Proc
    ts: int
    events: list[RawEvent] = field(default_factory=list)
    background: set[int] = field(default_factory=set)
    state: dict[str, Any] = field(default_factory=dict)
    uid: int = 0

    def emit(self, proc: _Proc, api: str, **args: Any) -> None:
        self.ts += self.rng.randint(1, 40)
        self.events.append(RawEvent(self.ts, proc.pid, proc.name, api, args))
        if self.rng.random() < self.family.noise:
            pool = BENIGN_NOISE if self.family.label is Label.BENIGN else MALWARE_NOISE
            self.ts += self.rng.randint(1, 20)
            self.events.append(RawEvent(self.ts, proc.pid, proc.name, self.rng.choice(pool), {}))

    def size(self, spec: MotifSpec, scale: float = 1.0) -> int:
        mu, sigma = spec.size
        return max(1, int(self.rng.lognormvariate(mu, sigma) * scale))

    def fresh(self) -> int:
        self.uid += 1
        return self.uid

    def new_pid(self) -> int:
        used = {self.main.pid, *self.background, *self.state.get("pids", ())}
        while True:
            pid = self.rng.randint(1000, 9999)
            if pid not in used:
                self.state.setdefault("pids", set()).add(pid)
                return pid

    def system_process(self, name: str) -> _Proc:
        procs = self.state.setdefault("system", {})
        if name not in procs:
            pid = self.new_pid()
            self.background.add(pid)
            procs[name] = _Proc(name, pid)
        return procs[name]


Motif = Callable[[_Builder, MotifSpec, _Proc], None]


def _office_io(b: _Builder, spec: MotifSpec, p: _Proc) -> None:
    docs = b.state.setdefault("docs", [f"{_USER}Documents\\report{b.rng.randint(1, 99)}.docx" for _ in range(2)])
    doc = b.rng.choice(docs)
    s = b.size(spec)
    b.emit(p, "CreateFile", FileName=doc)
    b.emit(p, "ReadFile", FileName=doc, ToReadBytes=s)
    b.emit(p, "RegQueryValue", Key="HKCU\\Software\\Microsoft\\Office\\Common", DataSize=b.rng.randint(8, 256))
    if b.rng.random() < 0.5:
        b.emit(p, "WriteFile", FileName=doc, ToWriteBytes=max(1, int(s * b.rng.uniform(0.8, 1.3))))
    if b.rng.random() < 0.6:
        b.emit(p, "WriteFile", FileName=f"{_USER}AppData\\Local\\Temp\\~wrd{b.fresh():04d}.tmp",
               ToWriteBytes=b.size(spec, 0.05))
    b.emit(p, "CloseHandle")


def _config_read(b: _Builder, spec: MotifSpec, p: _Proc) -> None:
    libs = ("kernel32.dll", "user32.dll", "gdi32.dll", "ole32.dll", "comctl32.dll", "msvcrt.dll")
    b.emit(p, "ReadFile", FileName=_SYSTEM + b.rng.choice(libs), ToReadBytes=b.size(spec))
    if b.rng.random() < 0.5:
        b.emit(p, "ReadFile", FileName=f"{_PROGRAMS}{b.family.image[:-4]}\\settings.ini",
               ToReadBytes=b.size(spec, 0.02))


def _registry_query(b: _Builder, spec: MotifSpec, p: _Proc) -> None:
    keys = ("HKLM\\Software\\Microsoft\\Windows\\CurrentVersion", "HKCU\\Control Panel\\Desktop",
            "HKLM\\System\\CurrentControlSet\\Control\\Nls", f"HKCU\\Software\\{b.family.image[:-4]}")
    b.emit(p, "RegOpenKey", Key=b.rng.choice(keys))
    for _ in range(b.rng.randint(1, 3)):
        b.emit(p, "RegQueryValue", Key=b.rng.choice(keys), DataSize=b.size(spec))
    b.emit(p, "RegCloseKey")


def _registry_settings(b: _Builder, spec: MotifSpec, p: _Proc) -> None:
    key = f"HKCU\\Software\\{b.family.image[:-4]}\\Settings"
    b.emit(p, "RegOpenKey", Key=key)
    b.emit(p, "RegSetValue", Key=f"{key}\\MRU{b.rng.randint(0, 3)}", DataSize=b.size(spec))
    b.emit(p, "RegCloseKey")


def _browsing(b: _Builder, spec: MotifSpec, p: _Proc) -> None:
    hosts = b.state.setdefault("hosts", [f"93.184.{b.rng.randint(0, 255)}.{b.rng.randint(1, 254)}:443"
                                         for _ in range(b.rng.randint(2, 5))])
    host = b.rng.choice(hosts)
    b.emit(p, "connect", Address=host)
    b.emit(p, "send", Address=host, SentBytes=b.rng.randint(300, 1500))
    total = 0
    for _ in range(b.rng.randint(1, 3)):
        s = b.size(spec)
        total += s
        b.emit(p, "recv", Address=host, ReceivedBytes=s)
    if b.rng.random() < 0.7:
        b.emit(p, "WriteFile", FileName=f"{_USER}AppData\\Local\\Cache\\entry{b.fresh():05d}",
               ToWriteBytes=max(1, int(total * b.rng.uniform(0.3, 1.0))))


def _spawn_helper(b: _Builder, spec: MotifSpec, p: _Proc) -> None:
    helper = b.state.get("helper")
    if helper is None:
        helper = _Proc(b.family.image.replace(".exe", "_helper.exe"), b.new_pid())
        b.state["helper"] = helper
        b.emit(p, "CreateProcess", ChildImage=helper.name, ChildPid=helper.pid, ImageSize=b.size(spec))
    _browsing(b, MotifSpec("browsing", 1.0, (10.0, 1.3)), helper)


def _self_replication(b: _Builder, spec: MotifSpec, p: _Proc) -> None:
    image_size = b.state.setdefault("image_size", b.size(spec))
    self_path = b.state.setdefault("self_path", f"{_USER}AppData\\Roaming\\{b.family.image}")
    b.emit(p, "ReadFile", FileName=self_path, ToReadBytes=image_size)
    b.emit(p, "FindFirstFile", FileName=_PROGRAMS + "*.exe")
    for _ in range(b.rng.randint(2, 5)):
        target = f"{_PROGRAMS}app{b.fresh():04d}\\app.exe"
        b.emit(p, "FindNextFile")
        b.emit(p, "WriteFile", FileName=target, ToWriteBytes=image_size)


def _registry_persistence(b: _Builder, spec: MotifSpec, p: _Proc) -> None:
    run = "HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Run"
    b.emit(p, "RegOpenKey", Key=run)
    b.emit(p, "RegSetValue", Key=f"{run}\\{p.name[:-4]}", DataSize=b.size(spec))
    b.emit(p, "RegCloseKey")


def _beacon(b: _Builder, spec: MotifSpec, p: _Proc) -> None:
    c2 = b.state.setdefault("c2", f"185.{b.rng.randint(0, 255)}.{b.rng.randint(0, 255)}.7:8080")
    b.emit(p, "connect", Address=c2)
    b.emit(p, "send", Address=c2, SentBytes=b.size(spec))
    b.emit(p, "recv", Address=c2, ReceivedBytes=b.size(spec, 0.5))
    b.emit(p, "Sleep", Milliseconds=1000)


def _payload_download(b: _Builder, spec: MotifSpec, p: _Proc) -> None:
    if "payload" in b.state:
        _beacon(b, MotifSpec("beacon", 1.0, (5.5, 0.4)), p)
        return
    host = f"91.{b.rng.randint(0, 255)}.{b.rng.randint(0, 255)}.12:80"
    b.emit(p, "connect", Address=host)
    b.emit(p, "send", Address=host, SentBytes=b.rng.randint(200, 400))
    total = 0
    for _ in range(b.rng.randint(2, 5)):
        s = b.size(spec)
        total += s
        b.emit(p, "recv", Address=host, ReceivedBytes=s)
    path = f"{_USER}AppData\\Local\\Temp\\{b.rng.randint(100, 999)}.exe"
    b.emit(p, "WriteFile", FileName=path, ToWriteBytes=total)
    child = _Proc(path.rsplit("\\", 1)[-1], b.new_pid())
    b.state["payload"] = child
    b.emit(p, "CreateProcess", ChildImage=child.name, ChildPid=child.pid, ImageSize=total)
    _registry_persistence(b, MotifSpec("registry_persistence", 1.0, (4.8, 0.3)), child)
    for _ in range(b.rng.randint(1, 3)):
        _beacon(b, MotifSpec("beacon", 1.0, (5.5, 0.4)), child)


def _file_encryption(b: _Builder, spec: MotifSpec, p: _Proc) -> None:
    b.emit(p, "FindFirstFile", FileName=_USER + "Documents\\*")
    for _ in range(b.rng.randint(1, 4)):
        f = f"{_USER}Documents\\file{b.fresh():04d}.{b.rng.choice(('docx', 'xlsx', 'pdf', 'jpg'))}"
        s = b.size(spec)
        b.emit(p, "FindNextFile")
        b.emit(p, "ReadFile", FileName=f, ToReadBytes=s)
        b.emit(p, "CryptEncrypt")
        b.emit(p, "WriteFile", FileName=f, ToWriteBytes=s + 16 - s % 16)


def _process_injection(b: _Builder, spec: MotifSpec, p: _Proc) -> None:
    target = b.system_process(b.rng.choice(("explorer.exe", "svchost.exe", "lsass.exe")))
    b.emit(p, "OpenProcess", TargetPid=target.pid)
    b.emit(p, "VirtualAllocEx", TargetPid=target.pid)
    b.emit(p, "WriteProcessMemory", TargetImage=target.name, TargetPid=target.pid, BytesWritten=b.size(spec))
    b.emit(p, "CreateRemoteThread", TargetPid=target.pid)


MOTIFS: dict[str, Motif] = {
    "office_io": _office_io,
    "config_read": _config_read,
    "registry_query": _registry_query,
    "registry_settings": _registry_settings,
    "browsing": _browsing,
    "spawn_helper": _spawn_helper,
    "self_replication": _self_replication,
    "registry_persistence": _registry_persistence,
    "beacon": _beacon,
    "payload_download": _payload_download,
    "file_encryption": _file_encryption,
    "process_injection": _process_injection,
}


def generate_one(spec: FamilySpec, index: int, seed: int) -> TraceLog:
    rng = random.Random(f"{seed}:{spec.name}:{index}")
    main = _Proc(spec.image, rng.randint(1000, 9999))
    b = _Builder(rng, spec, main, ts=rng.randint(0, 10_000))
    target = rng.randint(*spec.events)
    weights = [m.weight for m in spec.motifs]
    while len(b.events) < target:
        motif = rng.choices(spec.motifs, weights)[0]
        MOTIFS[motif.name](b, motif, main)
    return TraceLog(f"{spec.name}-{index:04d}", spec.label, spec.name, b.events, frozenset(b.background))


def generate(spec: FamilySpec, count: int, seed: int = 0) -> list[TraceLog]:
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate_one(spec, i, seed) for i in range(count)]


def generate_corpus(families: Sequence[FamilySpec], count: int, seed: int = 0) -> list[TraceLog]:
    """``count`` traces per family, in family order."""
    return [t for spec in families for t in generate(spec, count, seed)]


def write_corpus(traces: Sequence[TraceLog], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in traces:
        path = out / f"{t.sample_id}.jsonl"
        write_trace(t, path)
        paths.append(path)
    return paths


def default_corpus(count: int = 150, seed: int = 0) -> list[TraceLog]:
    return generate_corpus(load_families(), count, seed)



def mesh_trace(n_edges: int, seed: int = 0, sample_id: str | None = None) -> TraceLog:
    """A trace whose graph has exactly ``n_edges`` edges.

    One root process spawns helpers; processes then read and write a shared
    pool of files, registry keys and sockets, which closes many cycles. Node
    count grows linearly with ``n_edges``. Used for timing studies.
    """
    if n_edges < 1:
        raise ValueError("n_edges must be >= 1")
    rng = random.Random(f"{seed}:mesh:{n_edges}")
    n_proc = max(2, n_edges // 12)
    procs = [_Proc("mesh.exe" if i == 0 else f"worker{i}.exe", 1000 + i) for i in range(n_proc)]
    n_res = max(2, n_edges // 4)
    resources = []
    for i in range(n_res):
        kind = rng.choice(("F", "F", "R", "S"))
        if kind == "F":
            resources.append(("ReadFile", "WriteFile", "FileName", f"{_USER}mesh\\f{i}.dat",
                              "ToReadBytes", "ToWriteBytes"))
        elif kind == "R":
            resources.append(("RegQueryValue", "RegSetValue", "Key", f"HKCU\\Software\\mesh\\k{i}",
                              "DataSize", "DataSize"))
        else:
            resources.append(("recv", "send", "Address", f"10.0.{i // 250}.{i % 250 + 1}:80",
                              "ReceivedBytes", "SentBytes"))
    events: list[RawEvent] = []
    ts = 0
    seen: set[tuple] = set()

    def emit(p: _Proc, api: str, **args: Any) -> None:
        nonlocal ts
        ts += rng.randint(1, 20)
        events.append(RawEvent(ts, p.pid, p.name, api, args))

    for child in procs[1:]:
        if len(seen) == n_edges:
            break
        seen.add(("spawn", child.pid))
        emit(procs[0], "CreateProcess", ChildImage=child.name, ChildPid=child.pid,
             ImageSize=rng.randint(10_000, 200_000))
    while len(seen) < n_edges:
        p = rng.choice(procs)
        r = rng.randrange(n_res)
        read_api, write_api, key, name, read_size, write_size = resources[r]
        direction = rng.random() < 0.5
        seen.add((p.pid, r, direction))
        size = rng.randint(16, 100_000)
        if direction:
            emit(p, read_api, **{key: name, read_size: size})
        else:
            emit(p, write_api, **{key: name, write_size: size})
    return TraceLog(sample_id or f"mesh-{n_edges}-{seed}", Label.UNKNOWN, None, events)

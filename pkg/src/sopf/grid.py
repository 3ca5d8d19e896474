"""Radial distribution network data model.

Buses, lines and generators are plain frozen dataclasses; a
:class:`NetworkModel` bundles them together with the island partition
derived from the line set. Power quantities are per-unit on ``mva_base``.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

__all__ = [
    "Bus",
    "Line",
    "Generator",
    "NetworkModel",
    "CostCoefficients",
    "NetworkError",
    "load_network",
    "parse_network",
    "network_to_dict",
    "dump_network",
    "validate",
    "duplicate_system",
    "ieee33",
    "dfs_order",
    "network_schema",
    "check_schema",
]

DG = "DG"
PV = "PV"


class NetworkError(ValueError):
    """Raised when a network file cannot be turned into a valid model.

    ``kind`` is one of ``parse``, ``missing-field``, ``dangling-reference``,
    ``non-tree`` or ``invalid``.
    """

    def __init__(self, kind, message, diagnostics=()):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.diagnostics = list(diagnostics)


@dataclass(frozen=True)
class Bus:
    id: int
    v_min_sq: float
    v_max_sq: float
    is_reference: bool = False
    load_p_base: float = 0.0
    load_q_base: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    tp_min: float = -10.0
    tp_max: float = 10.0
    tq_min: float = -10.0
    tq_max: float = 10.0


@dataclass(frozen=True)
class Generator:
    bus: int
    kind: str
    p_min: float
    p_max: float
    q_min: float = 0.0
    q_max: float = 0.0
    pv_tan_phi: float = 0.0

    @property
    def is_dg(self):
        return self.kind == DG

    @property
    def is_pv(self):
        return self.kind == PV


@dataclass(frozen=True)
class CostCoefficients:
    """Linear cost rates in $ per per-unit-power-hour."""

    c_loss: float = 60.0
    c_pv: float = 100.0
    c_dg: float = 10.0

    def __post_init__(self):
        if min(self.c_loss, self.c_pv, self.c_dg) < 0:
            raise ValueError("cost coefficients must be non-negative")
        if self.c_dg <= 0:
            raise ValueError("c_dg must be strictly positive")


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple
    lines: tuple
    generators: tuple
    mva_base: float = 1.0
    name: str = "network"
    islands: tuple = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "generators", tuple(self.generators))
        if self.islands is None:
            object.__setattr__(self, "islands", _components(self.buses, self.lines))

    # Convenience lookups. Cheap enough to recompute; the model is small.

    @property
    def bus_ids(self):
        return [b.id for b in self.buses]

    def bus(self, bus_id):
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    @property
    def dgs(self):
        return [g for g in self.generators if g.is_dg]

    @property
    def pvs(self):
        return [g for g in self.generators if g.is_pv]

    @property
    def reference_buses(self):
        return [b.id for b in self.buses if b.is_reference]

    def children(self):
        """Map bus id -> indices of lines leaving that bus."""
        out = defaultdict(list)
        for k, ln in enumerate(self.lines):
            out[ln.from_bus].append(k)
        return out

    def parent_line(self):
        """Map bus id -> index of the line entering that bus."""
        return {ln.to_bus: k for k, ln in enumerate(self.lines)}


def _components(buses, lines):
    ids = [b.id for b in buses]
    adj = {i: set() for i in ids}
    for ln in lines:
        if ln.from_bus in adj and ln.to_bus in adj:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
    seen = set()
    comps = []
    for i in ids:
        if i in seen:
            continue
        stack, comp = [i], []
        seen.add(i)
        while stack:
            u = stack.pop()
            comp.append(u)
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        comps.append(tuple(sorted(comp)))
    return tuple(comps)


def validate(model):
    """Return a list of human-readable diagnostics; empty means valid."""
    diags = []
    ids = [b.id for b in model.buses]
    id_set = set(ids)
    if len(id_set) != len(ids):
        diags.append("duplicate bus ids")
    for b in model.buses:
        if not (0 < b.v_min_sq < b.v_max_sq):
            diags.append(f"bus {b.id}: voltage bounds require 0 < vmin^2 < vmax^2 "
                         f"(got {b.v_min_sq}, {b.v_max_sq})")
    dangling = False
    for k, ln in enumerate(model.lines):
        for end in (ln.from_bus, ln.to_bus):
            if end not in id_set:
                diags.append(f"line {k} ({ln.from_bus}->{ln.to_bus}): unknown bus {end}")
                dangling = True
        if ln.r < 0 or ln.x < 0:
            diags.append(f"line {k}: negative impedance")
        if ln.tp_min > ln.tp_max or ln.tq_min > ln.tq_max:
            diags.append(f"line {k}: inverted flow limits")
    for k, g in enumerate(model.generators):
        if g.bus not in id_set:
            diags.append(f"generator {k}: unknown bus {g.bus}")
        if g.kind not in (DG, PV):
            diags.append(f"generator {k}: unknown kind {g.kind!r}")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            diags.append(f"generator {k} at bus {g.bus}: inverted output limits")
        if g.is_pv and g.pv_tan_phi < 0:
            diags.append(f"generator {k} at bus {g.bus}: negative tan(phi)")
    if dangling:
        return diags

    islands = _components(model.buses, model.lines)
    by_bus = {b.id: b for b in model.buses}
    in_deg = defaultdict(int)
    for ln in model.lines:
        in_deg[ln.to_bus] += 1
    for isl in islands:
        refs = [i for i in isl if by_bus[i].is_reference]
        n_lines = sum(1 for ln in model.lines if ln.from_bus in isl)
        if len(refs) != 1:
            diags.append(f"island containing bus {isl[0]}: expected one reference bus, "
                         f"found {len(refs)}")
        if n_lines != len(isl) - 1:
            diags.append(f"island containing bus {isl[0]}: not a tree "
                         f"({len(isl)} buses, {n_lines} lines)")
            continue
        if len(refs) == 1:
            root = refs[0]
            for i in isl:
                want = 0 if i == root else 1
                if in_deg[i] != want:
                    diags.append(f"bus {i}: lines not oriented away from reference bus {root}")
    return diags


def dfs_order(model):
    """Buses in depth-first order from each reference bus, following line orientation."""
    kids = defaultdict(list)
    for ln in model.lines:
        kids[ln.from_bus].append(ln.to_bus)
    order = []
    for r in model.reference_buses:
        stack = [r]
        while stack:
            u = stack.pop()
            order.append(u)
            stack.extend(kids[u])
    return order


def _require(obj, key, where):
    try:
        return obj[key]
    except (KeyError, TypeError):
        raise NetworkError("missing-field", f"{where}: missing field {key!r}") from None


def parse_network(doc):
    """Build a model from the JSON-schema dict and validate it."""
    if not isinstance(doc, dict):
        raise NetworkError("parse", "top-level value must be an object")
    mva = float(doc.get("mva_base", 1.0))
    buses = []
    for k, b in enumerate(_require(doc, "buses", "network")):
        where = f"buses[{k}]"
        vmin = float(_require(b, "vmin", where))
        vmax = float(_require(b, "vmax", where))
        buses.append(Bus(
            id=int(_require(b, "id", where)),
            v_min_sq=vmin,
            v_max_sq=vmax,
            is_reference=bool(b.get("ref", False)),
            load_p_base=float(b.get("p_load", 0.0)),
            load_q_base=float(b.get("q_load", 0.0)),
        ))
    lines = []
    for k, ln in enumerate(_require(doc, "lines", "network")):
        where = f"lines[{k}]"
        tp_max = float(ln.get("tp_max", 10.0))
        tq_max = float(ln.get("tq_max", 10.0))
        lines.append(Line(
            from_bus=int(_require(ln, "from", where)),
            to_bus=int(_require(ln, "to", where)),
            r=float(_require(ln, "r", where)),
            x=float(_require(ln, "x", where)),
            tp_min=float(ln.get("tp_min", -tp_max)),
            tp_max=tp_max,
            tq_min=float(ln.get("tq_min", -tq_max)),
            tq_max=tq_max,
        ))
    gens = []
    for k, g in enumerate(doc.get("generators", [])):
        where = f"generators[{k}]"
        gens.append(Generator(
            bus=int(_require(g, "bus", where)),
            kind=str(_require(g, "kind", where)),
            p_min=float(_require(g, "p_min", where)),
            p_max=float(_require(g, "p_max", where)),
            q_min=float(g.get("q_min", 0.0)),
            q_max=float(g.get("q_max", 0.0)),
            pv_tan_phi=float(g.get("tan_phi", 0.0)),
        ))
    model = NetworkModel(buses, lines, gens, mva_base=mva, name=str(doc.get("name", "network")))
    diags = validate(model)
    if diags:
        if any("unknown bus" in d for d in diags):
            kind = "dangling-reference"
        elif any("not a tree" in d or "not oriented" in d for d in diags):
            kind = "non-tree"
        else:
            kind = "invalid"
        raise NetworkError(kind, "; ".join(diags), diags)
    return model


def load_network(path):
    """Read and validate a network JSON file. ``"ieee33"`` loads the bundled case."""
    if str(path).lower() == "ieee33":
        return ieee33()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError("parse", f"{path}: {exc}") from exc
    return parse_network(doc)


def network_to_dict(model):
    return {
        "name": model.name,
        "mva_base": model.mva_base,
        "buses": [
            {"id": b.id, "vmin": b.v_min_sq, "vmax": b.v_max_sq, "ref": b.is_reference,
             "p_load": b.load_p_base, "q_load": b.load_q_base}
            for b in model.buses
        ],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x,
             "tp_min": ln.tp_min, "tp_max": ln.tp_max, "tq_min": ln.tq_min, "tq_max": ln.tq_max}
            for ln in model.lines
        ],
        "generators": [
            {"bus": g.bus, "kind": g.kind, "p_min": g.p_min, "p_max": g.p_max,
             "q_min": g.q_min, "q_max": g.q_max, "tan_phi": g.pv_tan_phi}
            for g in model.generators
        ],
    }


def dump_network(model, path):
    Path(path).write_text(json.dumps(network_to_dict(model), indent=1))


def duplicate_system(model, k):
    """Return ``k`` electrically disconnected copies of ``model`` as one network.

    Copy ``c`` (0-based) shifts every bus id by ``c * (max_id)``.
    """
    if not isinstance(k, int) or k < 1:
        raise ValueError(f"duplication factor must be a positive integer, got {k!r}")
    if k == 1:
        return model
    shift = max(model.bus_ids)
    buses, lines, gens = [], [], []
    for c in range(k):
        off = c * shift
        buses += [replace(b, id=b.id + off) for b in model.buses]
        lines += [replace(ln, from_bus=ln.from_bus + off, to_bus=ln.to_bus + off)
                  for ln in model.lines]
        gens += [replace(g, bus=g.bus + off) for g in model.generators]
    return NetworkModel(buses, lines, gens, mva_base=model.mva_base,
                        name=f"{model.name}x{k}")


def network_schema():
    return json.loads(resources.files("sopf.data").joinpath("network.schema.json").read_text())


def check_schema(doc):
    """Schema diagnostics for a raw network document (empty list means it conforms)."""
    import jsonschema

    validator = jsonschema.Draft202012Validator(network_schema())
    return [f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}"
            for e in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.path)))]


def ieee33():
    """The bundled 33-bus feeder with 3 DGs and 6 PV units."""
    text = resources.files("sopf.data").joinpath("ieee33.json").read_text()
    return parse_network(json.loads(text))


def load_power_factor_tan(pf=0.9):
    return math.tan(math.acos(pf))

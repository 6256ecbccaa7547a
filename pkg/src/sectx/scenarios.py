"""Scenario files: schema, loading, and turning a scenario into a runnable world.

A scenario is a JSON document (``"schema": 1``) naming principals,
locations, stored fields, transaction programs and a start-time template.
Bundled scenarios live in ``sectx/data`` and can be loaded by name.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Union

import jsonschema

from .lattice import Label
from .netsim import NetworkPolicy, RunResult, TxnSpec, World, run_to_quiescence
from .protocols import Workload, make_protocol
from .txdsl import CheckReport, Env, FieldInfo, ParseError, Program, check_program, parse_program

SCHEMA_VERSION = 1

_LABEL = {
    "type": "object",
    "required": ["readers", "writers"],
    "additionalProperties": False,
    "properties": {
        "readers": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
        "writers": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
    },
}

SCHEMA: dict = {
    "type": "object",
    "required": ["schema", "name", "principals", "locations", "stores", "programs"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "principals": {"type": "array", "items": {"type": "string", "minLength": 1},
                       "uniqueItems": True},
        "locations": {"type": "array", "items": {
            "type": "object", "required": ["id", "label"], "additionalProperties": False,
            "properties": {"id": {"type": "string", "minLength": 1}, "label": _LABEL}}},
        "label_vars": {"type": "object", "additionalProperties": _LABEL},
        "stores": {"type": "array", "items": {
            "type": "object", "required": ["location", "fields"], "additionalProperties": False,
            "properties": {
                "location": {"type": "string"},
                "fields": {"type": "array", "items": {
                    "type": "object", "required": ["name", "label"],
                    "additionalProperties": False,
                    "properties": {
                        "name": {"type": "string", "pattern": "^[A-Za-z_][A-Za-z0-9_]*$"},
                        "label": {"oneOf": [
                            _LABEL,
                            {"type": "object", "required": ["var"], "additionalProperties": False,
                             "properties": {"var": {"type": "string"}}}]},
                        "init": {"type": ["string", "boolean", "null"]},
                    }}},
            }}},
        "programs": {"type": "array", "items": {
            "type": "object", "required": ["name", "principal", "location", "source"],
            "additionalProperties": False,
            "properties": {"name": {"type": "string", "minLength": 1},
                           "principal": {"type": "string"},
                           "location": {"type": "string"},
                           "source": {"type": "string"}}}},
        "starts": {"type": "array", "items": {
            "type": "object", "required": ["txn", "program"], "additionalProperties": False,
            "properties": {"txn": {"type": "string", "minLength": 1},
                           "program": {"type": "string"},
                           "window": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                      "minItems": 2, "maxItems": 2}}}},
        "variants": {"type": "object", "additionalProperties": {
            "type": "object", "additionalProperties": {"type": ["string", "boolean", "null"]}}},
        "protocol": {"enum": ["2pc", "locks", "sc"]},
        "network": {"type": "object", "additionalProperties": False,
                    "properties": {"min_delay": {"type": "integer", "minimum": 0},
                                   "max_delay": {"type": "integer", "minimum": 0}}},
        "observer": {"type": "string"},
    },
}


class SchemaError(ValueError):
    def __init__(self, msg: str, path: str = ""):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


@dataclass(frozen=True)
class FieldSpec:
    name: str
    label: Optional[Label] = None
    var: Optional[str] = None
    init: Any = None


@dataclass(frozen=True)
class StoreSpec:
    location: str
    fields: tuple[FieldSpec, ...]


@dataclass(frozen=True)
class ProgramSpec:
    name: str
    principal: str
    location: str
    source: str


@dataclass(frozen=True)
class StartSpec:
    txn: str
    program: str
    window: tuple[int, int] = (0, 0)


@dataclass
class Scenario:
    name: str
    principals: tuple[str, ...]
    locations: dict[str, Label]
    stores: tuple[StoreSpec, ...]
    programs: tuple[ProgramSpec, ...]
    starts: tuple[StartSpec, ...] = ()
    label_vars: dict[str, Label] = field(default_factory=dict)
    variants: dict[str, dict[str, Any]] = field(default_factory=dict)
    protocol: str = "sc"
    network: NetworkPolicy = NetworkPolicy()
    observer: Optional[str] = None
    description: str = ""

    # -- views ------------------------------------------------------------

    @property
    def universe(self) -> frozenset[str]:
        return frozenset(self.principals)

    def field_ids(self) -> list[str]:
        return [f"{s.location}.{f.name}" for s in self.stores for f in s.fields]

    def env(self, bindings: Optional[Mapping[str, Label]] = None) -> Env:
        labels = {**self.label_vars, **(bindings or {})}
        fields = {}
        for s in self.stores:
            for f in s.fields:
                lab = labels[f.var] if f.var else f.label
                fields[f"{s.location}.{f.name}"] = FieldInfo(lab, s.location, f.var)
        return Env(self.universe, fields, dict(self.locations))

    def program_spec(self, name: str) -> ProgramSpec:
        for p in self.programs:
            if p.name == name:
                return p
        raise KeyError(name)

    def parsed(self) -> dict[str, Program]:
        ids = self.field_ids()
        return {p.name: parse_program(p.source, name=p.name, principal=p.principal,
                                      location=p.location, fields=ids)
                for p in self.programs}

    def check(self, bindings: Optional[Mapping[str, Label]] = None) -> list[CheckReport]:
        env = self.env(bindings)
        return [check_program(p, env, bindings) for p in self.parsed().values()]

    def values(self, variant: Optional[str] = None) -> dict[str, Any]:
        vals = {f"{s.location}.{f.name}": f.init for s in self.stores for f in s.fields}
        if variant is not None:
            if variant not in self.variants:
                raise KeyError(f"unknown variant {variant!r}")
            vals.update(self.variants[variant])
        return vals

    def workload(self, variant: Optional[str] = None,
                 bindings: Optional[Mapping[str, Label]] = None) -> Workload:
        return Workload(self.env(bindings), self.parsed(), self.values(variant))

    def txn_specs(self, seed: int = 0, *, only: Optional[Iterable[str]] = None,
                  at_zero: bool = False) -> list[TxnSpec]:
        keep = set(only) if only is not None else None
        out = []
        for s in self.starts:
            if keep is not None and s.txn not in keep:
                continue
            lo, hi = s.window
            t = 0 if at_zero else random.Random(f"{seed}:start:{s.txn}").randint(lo, hi)
            out.append(TxnSpec(s.txn, s.program, self.program_spec(s.program).location, t))
        return out

    def world(self, protocol: Union[str, Any, None] = None, seed: int = 0, *,
              variant: Optional[str] = None, only: Optional[Iterable[str]] = None,
              at_zero: bool = False, workload: Optional[Workload] = None) -> World:
        proto = make_protocol(protocol or self.protocol) if protocol is None or isinstance(
            protocol, str) else protocol
        wl = workload or self.workload(variant)
        return World(self.locations, proto, self.txn_specs(seed, only=only, at_zero=at_zero),
                     seed=seed, network=self.network, universe=self.universe, context=wl)

    def run(self, protocol: Union[str, Any, None] = None, seed: int = 0, *,
            variant: Optional[str] = None, max_steps: Optional[int] = None,
            workload: Optional[Workload] = None) -> RunResult:
        return run_to_quiescence(self.world(protocol, seed, variant=variant, workload=workload),
                                 max_steps)

    # -- serialization ----------------------------------------------------

    def to_json(self) -> dict:
        d: dict[str, Any] = {"schema": SCHEMA_VERSION, "name": self.name}
        if self.description:
            d["description"] = self.description
        d["principals"] = list(self.principals)
        d["locations"] = [{"id": k, "label": v.to_json()} for k, v in self.locations.items()]
        if self.label_vars:
            d["label_vars"] = {k: v.to_json() for k, v in self.label_vars.items()}
        d["stores"] = [{"location": s.location, "fields": [
            {"name": f.name, "label": {"var": f.var} if f.var else f.label.to_json(),
             "init": f.init} for f in s.fields]} for s in self.stores]
        d["programs"] = [{"name": p.name, "principal": p.principal, "location": p.location,
                          "source": p.source} for p in self.programs]
        d["starts"] = [{"txn": s.txn, "program": s.program, "window": list(s.window)}
                       for s in self.starts]
        d["variants"] = {k: dict(v) for k, v in self.variants.items()}
        d["protocol"] = self.protocol
        d["network"] = {"min_delay": self.network.min_delay, "max_delay": self.network.max_delay}
        if self.observer is not None:
            d["observer"] = self.observer
        return d

    @classmethod
    def from_json(cls, d: Any) -> "Scenario":
        try:
            jsonschema.validate(d, SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path)
            raise SchemaError(exc.message, "/" + path) from None
        universe = set(d["principals"])

        def label(raw: dict, path: str) -> Label:
            unknown = (set(raw["readers"]) | set(raw["writers"])) - universe
            if unknown:
                raise SchemaError(f"undeclared principals {sorted(unknown)}", path)
            try:
                return Label(raw["readers"], raw["writers"])
            except ValueError as exc:
                raise SchemaError(str(exc), path) from None

        locations: dict[str, Label] = {}
        for i, l in enumerate(d["locations"]):
            if l["id"] in locations:
                raise SchemaError(f"duplicate location {l['id']!r}", f"/locations/{i}/id")
            locations[l["id"]] = label(l["label"], f"/locations/{i}/label")
        label_vars = {k: label(v, f"/label_vars/{k}") for k, v in d.get("label_vars", {}).items()}
        stores, fids = [], set()
        for i, s in enumerate(d["stores"]):
            if s["location"] not in locations:
                raise SchemaError(f"unknown location {s['location']!r}", f"/stores/{i}/location")
            fs = []
            for j, f in enumerate(s["fields"]):
                path = f"/stores/{i}/fields/{j}"
                fid = f"{s['location']}.{f['name']}"
                if fid in fids:
                    raise SchemaError(f"duplicate field {fid!r}", path)
                fids.add(fid)
                raw = f["label"]
                if "var" in raw:
                    if raw["var"] not in label_vars:
                        raise SchemaError(f"unknown label variable {raw['var']!r}", path + "/label")
                    fs.append(FieldSpec(f["name"], None, raw["var"], f.get("init")))
                else:
                    fs.append(FieldSpec(f["name"], label(raw, path + "/label"), None,
                                        f.get("init")))
            stores.append(StoreSpec(s["location"], tuple(fs)))
        programs, names = [], set()
        for i, p in enumerate(d["programs"]):
            path = f"/programs/{i}"
            if p["name"] in names:
                raise SchemaError(f"duplicate program {p['name']!r}", path + "/name")
            names.add(p["name"])
            if p["principal"] not in universe:
                raise SchemaError(f"undeclared principal {p['principal']!r}", path + "/principal")
            if p["location"] not in locations:
                raise SchemaError(f"unknown location {p['location']!r}", path + "/location")
            try:
                parse_program(p["source"], name=p["name"], fields=fids)
            except ParseError as exc:
                raise SchemaError(str(exc), path + "/source") from None
            programs.append(ProgramSpec(p["name"], p["principal"], p["location"], p["source"]))
        starts, txns = [], set()
        for i, s in enumerate(d.get("starts", [])):
            path = f"/starts/{i}"
            if s["txn"] in txns:
                raise SchemaError(f"duplicate transaction {s['txn']!r}", path + "/txn")
            txns.add(s["txn"])
            if s["program"] not in names:
                raise SchemaError(f"unknown program {s['program']!r}", path + "/program")
            lo, hi = s.get("window", [0, 0])
            if lo > hi:
                raise SchemaError("window lower bound exceeds upper bound", path + "/window")
            starts.append(StartSpec(s["txn"], s["program"], (lo, hi)))
        for v, over in d.get("variants", {}).items():
            for fid in over:
                if fid not in fids:
                    raise SchemaError(f"unknown field {fid!r}", f"/variants/{v}")
        net = d.get("network", {})
        policy = NetworkPolicy(net.get("min_delay", 1), net.get("max_delay", 4))
        if policy.min_delay > policy.max_delay:
            raise SchemaError("min_delay exceeds max_delay", "/network")
        obs = d.get("observer")
        if obs is not None and obs not in universe:
            raise SchemaError(f"undeclared principal {obs!r}", "/observer")
        return cls(d["name"], tuple(d["principals"]), locations, tuple(stores), tuple(programs),
                   tuple(starts), label_vars, {k: dict(v) for k, v in d.get("variants", {}).items()},
                   d.get("protocol", "sc"), policy, obs, d.get("description", ""))


def bundled_names() -> list[str]:
    root = resources.files("sectx") / "data"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _read(ref: Union[str, Path]) -> tuple[str, str]:
    p = Path(ref)
    if p.exists():
        return p.read_text(encoding="utf-8"), str(p)
    name = p.name[:-5] if p.name.endswith(".json") else p.name
    res = resources.files("sectx") / "data" / f"{name}.json"
    if res.is_file():
        return res.read_text(encoding="utf-8"), f"<bundled {name}>"
    raise SchemaError(f"no scenario file or bundled scenario named {str(ref)!r}")


def load_scenario(ref: Union[str, Path]) -> Scenario:
    """Load from a path, or by bundled name (``hospital_secure`` / ``blog.json``)."""
    text, where = _read(ref)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{where}: invalid JSON: {exc}") from None
    return Scenario.from_json(raw)


def save_scenario(s: Scenario, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(s.to_json(), indent=2) + "\n", encoding="utf-8")

"""Sectioned text format for networks (and reused by the experiment config).

Layout::

    # comment
    [meta]
    key,value
    format,1
    base_mva,10

    [buses]
    id,kind,nominal_kv,v_set
    node1,pq,20,
    ...

Sections start with ``[name]``; the first non-comment line of a section is a
header naming the columns, every further line is one comma-separated record.
``#`` starts a comment anywhere on a line.  Canonical serialization sorts
records by id, so parse -> serialize -> parse is a fixed point.
"""

from __future__ import annotations

import os

from .errors import GridFileError
from .netmodel import (Branch, Bus, Generator, Load, Network, validate_network)

FORMAT_VERSION = "1"

_BUS_COLS = ("id", "kind", "nominal_kv", "v_set")
_BRANCH_COLS = ("id", "from_bus", "to_bus", "r_per_km", "x_per_km", "b_per_km",
                "length_km", "tap_ratio")
_LOAD_COLS = ("id", "bus", "p_mw", "q_mvar")
_GEN_COLS = ("id", "bus", "p_set_mw", "q_set_mvar", "q_min_mvar", "q_max_mvar",
             "controllable", "external")
NETWORK_SECTIONS = ("meta", "buses", "branches", "loads", "generators")


class Record:
    """One parsed data row with its source position, for error reporting."""

    __slots__ = ("values", "line", "cols")

    def __init__(self, values: dict[str, str], line: int, cols: dict[str, int]):
        self.values = values
        self.line = line
        self.cols = cols  # column name -> 1-based char offset in the line

    def get(self, name: str) -> str:
        return self.values[name]

    def err(self, name: str, message: str, path: str | None = None) -> GridFileError:
        return GridFileError(message, line=self.line, col=self.cols.get(name), path=path)


def read_sections(text: str, path: str | None = None) -> dict[str, list[Record]]:
    """Split a sectioned file into records; purely lexical, no semantics."""
    sections: dict[str, list[Record]] = {}
    current: str | None = None
    header: list[str] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        hash_pos = raw.find("#")
        line = raw[:hash_pos] if hash_pos >= 0 else raw
        if not line.strip():
            continue
        stripped = line.strip()
        if stripped.startswith("["):
            if not stripped.endswith("]") or len(stripped) < 3:
                raise GridFileError(f"malformed section header {stripped!r}",
                                    line=lineno, col=1, path=path)
            current = stripped[1:-1]
            if current in sections:
                raise GridFileError(f"duplicate section [{current}]",
                                    line=lineno, col=1, path=path)
            sections[current] = []
            header = None
            continue
        if current is None:
            raise GridFileError("data before first section header",
                                line=lineno, col=1, path=path)
        fields = [f.strip() for f in line.split(",")]
        if header is None:
            header = fields
            if len(set(header)) != len(header):
                raise GridFileError("duplicate column name in header",
                                    line=lineno, col=1, path=path)
            continue
        if len(fields) != len(header):
            raise GridFileError(
                f"expected {len(header)} fields, got {len(fields)}",
                line=lineno, col=1, path=path)
        cols: dict[str, int] = {}
        offset = 1
        for name, field in zip(header, line.split(",")):
            cols[name] = offset + len(field) - len(field.lstrip())
            offset += len(field) + 1
        sections[current].append(Record(dict(zip(header, fields)), lineno, cols))
    return sections


def _require_columns(records: list[Record], required: tuple[str, ...], section: str,
                     path: str | None) -> None:
    if not records:
        return
    have = set(records[0].values)
    missing = [c for c in required if c not in have]
    if missing:
        raise GridFileError(
            f"[{section}] header missing column(s): {', '.join(missing)}",
            line=records[0].line, path=path)
    unknown = [c for c in records[0].values if c not in required]
    if unknown:
        raise GridFileError(
            f"[{section}] unknown column(s): {', '.join(unknown)}",
            line=records[0].line, path=path)


def _float(rec: Record, name: str, path: str | None) -> float:
    try:
        return float(rec.get(name))
    except ValueError:
        raise rec.err(name, f"bad numeric value {rec.get(name)!r} for {name}", path) from None


def _bool(rec: Record, name: str, path: str | None) -> bool:
    v = rec.get(name).lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise rec.err(name, f"bad boolean {rec.get(name)!r} for {name}", path)


def parse_network_text(text: str, path: str | None = None) -> Network:
    sections = read_sections(text, path)
    unknown = set(sections) - set(NETWORK_SECTIONS)
    if unknown:
        raise GridFileError(f"unknown section(s): {', '.join(sorted(unknown))}", path=path)
    for required in ("meta", "buses", "branches"):
        if required not in sections:
            raise GridFileError(f"missing [{required}] section", path=path)

    meta: dict[str, str] = {}
    for rec in sections["meta"]:
        meta[rec.get("key")] = rec.get("value")
    if meta.get("format") != FORMAT_VERSION:
        raise GridFileError(
            f"unsupported or missing format version (need format={FORMAT_VERSION})", path=path)
    try:
        base_mva = float(meta.get("base_mva", ""))
    except ValueError:
        raise GridFileError("meta key base_mva missing or not numeric", path=path) from None
    base_f = float(meta.get("base_frequency_hz", "50"))
    name = meta.get("name", "")

    _require_columns(sections["buses"], _BUS_COLS, "buses", path)
    buses = []
    for rec in sections["buses"]:
        v_set_raw = rec.get("v_set")
        buses.append(Bus(
            id=rec.get("id"),
            kind=rec.get("kind").lower(),
            nominal_kv=_float(rec, "nominal_kv", path),
            v_set=None if v_set_raw == "" else _float(rec, "v_set", path),
        ))

    _require_columns(sections["branches"], _BRANCH_COLS, "branches", path)
    branches = []
    for rec in sections["branches"]:
        branches.append(Branch(
            id=rec.get("id"),
            from_bus=rec.get("from_bus"),
            to_bus=rec.get("to_bus"),
            r_per_km=_float(rec, "r_per_km", path),
            x_per_km=_float(rec, "x_per_km", path),
            b_per_km=_float(rec, "b_per_km", path),
            length_km=_float(rec, "length_km", path),
            tap_ratio=_float(rec, "tap_ratio", path),
        ))

    loads = []
    _require_columns(sections.get("loads", []), _LOAD_COLS, "loads", path)
    for rec in sections.get("loads", []):
        loads.append(Load(rec.get("id"), rec.get("bus"),
                          _float(rec, "p_mw", path), _float(rec, "q_mvar", path)))

    gens = []
    _require_columns(sections.get("generators", []), _GEN_COLS, "generators", path)
    for rec in sections.get("generators", []):
        gens.append(Generator(
            id=rec.get("id"), bus=rec.get("bus"),
            p_set_mw=_float(rec, "p_set_mw", path),
            q_set_mvar=_float(rec, "q_set_mvar", path),
            q_min_mvar=_float(rec, "q_min_mvar", path),
            q_max_mvar=_float(rec, "q_max_mvar", path),
            controllable=_bool(rec, "controllable", path),
            external=_bool(rec, "external", path),
        ))

    net = Network(tuple(buses), tuple(branches), tuple(loads), tuple(gens),
                  base_mva=base_mva, base_frequency_hz=base_f, name=name)
    validate_network(net)
    return net


def parse_network(path: str | os.PathLike) -> Network:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_network_text(fh.read(), path=str(path))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_network(net: Network) -> str:
    """Canonical form: fixed section order, records sorted by id."""
    out = []
    out.append("[meta]")
    out.append("key,value")
    meta = {
        "format": FORMAT_VERSION,
        "base_mva": _fmt(net.base_mva),
        "base_frequency_hz": _fmt(net.base_frequency_hz),
    }
    if net.name:
        meta["name"] = net.name
    for k in sorted(meta):
        out.append(f"{k},{meta[k]}")

    out.append("")
    out.append("[buses]")
    out.append(",".join(_BUS_COLS))
    for b in sorted(net.buses, key=lambda b: b.id):
        v_set = "" if b.v_set is None else _fmt(b.v_set)
        out.append(f"{b.id},{b.kind},{_fmt(b.nominal_kv)},{v_set}")

    out.append("")
    out.append("[branches]")
    out.append(",".join(_BRANCH_COLS))
    for br in sorted(net.branches, key=lambda br: br.id):
        out.append(",".join([br.id, br.from_bus, br.to_bus, _fmt(br.r_per_km),
                             _fmt(br.x_per_km), _fmt(br.b_per_km),
                             _fmt(br.length_km), _fmt(br.tap_ratio)]))

    out.append("")
    out.append("[loads]")
    out.append(",".join(_LOAD_COLS))
    for ld in sorted(net.loads, key=lambda ld: ld.id):
        out.append(f"{ld.id},{ld.bus},{_fmt(ld.p_mw)},{_fmt(ld.q_mvar)}")

    out.append("")
    out.append("[generators]")
    out.append(",".join(_GEN_COLS))
    for g in sorted(net.generators, key=lambda g: g.id):
        out.append(",".join([g.id, g.bus, _fmt(g.p_set_mw), _fmt(g.q_set_mvar),
                             _fmt(g.q_min_mvar), _fmt(g.q_max_mvar),
                             _fmt(g.controllable), _fmt(g.external)]))
    out.append("")
    return "\n".join(out)


def write_network(net: Network, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_network(net))

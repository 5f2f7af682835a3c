"""Case file reader/writer and access to the bundled test systems.

The on-disk format is a plain sectioned text document; the exact column
names and units are documented in ``docs/case-format.md`` at the repository
root.  All quantities are per unit on the declared MVA base, angles in
radians.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .network import Branch, Bus, GeneratorParams, Load, NetworkCase, VscTerminal

__all__ = [
    "parse_case",
    "read_case",
    "write_case",
    "bundled_case",
    "bundled_case_names",
    "load_case",
]

_SECTIONS = ("buses", "branches", "generators", "vscs", "loads")


def parse_case(text, name_hint="case"):
    """Parse the sectioned case format from a string.

    Raises :class:`ConfigError` with the offending line number on malformed
    input.
    """
    header = {}
    rows = {s: [] for s in _SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if section is None:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise ConfigError(f"line {lineno}: expected 'key value' before first section")
            header[parts[0].lower()] = parts[1].strip()
        else:
            rows[section].append((lineno, line.split()))

    name = header.get("name", name_hint)
    try:
        base_mva = float(header.get("base_mva", "100"))
    except ValueError:
        raise ConfigError("header: base_mva is not a number") from None
    if "omega0" in header and "f_hz" in header:
        raise ConfigError("header: give either omega0 or f_hz, not both")
    try:
        if "omega0" in header:
            omega0 = float(header["omega0"])
        else:
            omega0 = 2.0 * np.pi * float(header.get("f_hz", "60"))
    except ValueError:
        raise ConfigError("header: omega0/f_hz is not a number") from None

    def fields(lineno, parts, count, kinds, what):
        if len(parts) != count:
            raise ConfigError(f"line {lineno}: {what} needs {count} fields, got {len(parts)}")
        out = []
        for p, k in zip(parts, kinds):
            try:
                out.append(k(p))
            except ValueError:
                raise ConfigError(f"line {lineno}: cannot parse {p!r} in {what}") from None
        return out

    buses = tuple(
        Bus(*fields(ln, p, 2, (int, str), "bus")) for ln, p in rows["buses"]
    )
    branches = tuple(
        Branch(*fields(ln, p, 5, (int, int, float, float, float), "branch"))
        for ln, p in rows["branches"]
    )
    generators = tuple(
        GeneratorParams(*fields(ln, p, 6, (int, float, float, float, float, float), "generator"))
        for ln, p in rows["generators"]
    )
    vscs = tuple(
        VscTerminal(*fields(ln, p, 4, (int, float, float, float), "vsc"))
        for ln, p in rows["vscs"]
    )
    loads = tuple(
        Load(*fields(ln, p, 3, (int, float, float), "load")) for ln, p in rows["loads"]
    )
    return NetworkCase(
        name=name,
        base_mva=base_mva,
        omega0=omega0,
        buses=buses,
        branches=branches,
        generators=generators,
        vscs=vscs,
        loads=loads,
    )


def read_case(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"case file not found: {path}")
    return parse_case(path.read_text(), name_hint=path.stem)


def write_case(case, path):
    """Serialize a case back to the sectioned text format (round-trips)."""
    out = [
        f"name {case.name}",
        f"base_mva {case.base_mva:.17g}",
        f"omega0 {case.omega0:.17g}",
        "",
        "[buses]",
    ]
    out += [f"{b.id} {b.kind}" for b in case.buses]
    out += ["", "[branches]"]
    out += [
        f"{br.from_bus} {br.to_bus} {br.g:.17g} {br.b:.17g} {br.b_shunt:.17g}"
        for br in case.branches
    ]
    out += ["", "[generators]"]
    out += [
        f"{g.bus} {g.inertia:.17g} {g.damping:.17g} {g.emf:.17g} {g.p_mech:.17g} {g.xd_t:.17g}"
        for g in case.generators
    ]
    out += ["", "[vscs]"]
    out += [f"{v.bus} {v.p_ref:.17g} {v.q_ref:.17g} {v.p_mod_limit:.17g}" for v in case.vscs]
    out += ["", "[loads]"]
    out += [f"{ld.bus} {ld.g:.17g} {ld.b:.17g}" for ld in case.loads]
    text = "\n".join(out) + "\n"
    Path(path).write_text(text)
    return text


def bundled_case_names():
    root = resources.files("wadc").joinpath("cases")
    return sorted(p.name[: -len(".case")] for p in root.iterdir() if p.name.endswith(".case"))


def bundled_case(name):
    """Load one of the test systems shipped with the package."""
    res = resources.files("wadc").joinpath("cases", f"{name}.case")
    try:
        text = res.read_text()
    except FileNotFoundError:
        raise ConfigError(
            f"unknown bundled case {name!r}; available: {', '.join(bundled_case_names())}"
        ) from None
    return parse_case(text, name_hint=name)


def load_case(spec):
    """Resolve a case given either a filesystem path or a bundled name."""
    p = Path(str(spec))
    if p.exists():
        return read_case(p)
    if str(spec).endswith(".case"):
        raise ConfigError(f"case file not found: {spec}")
    return bundled_case(str(spec))

"""Case and dataset files.

Case files are JSON documents with ``"schema": "regeq-case/1"``::

    {
      "schema": "regeq-case/1",
      "name": "three_bus",
      "slack_bus": 1,
      "regulation": {"up_factor": 10.0, "dn_factor": 0.05},
      "buses": [{"id": 1, "demand": 0.0, "shed_cost_lin": 1000.0,
                 "shed_cost_quad": 0.5}, ...],
      "lines": [{"id": "1-2", "from": 1, "to": 2, "reactance": 0.1,
                 "limit": 500.0}, ...],
      "generators": [{"bus": 1, "cost_lin": 10.0, "cost_quad": 0.05,
                      "p_min": 0.0, "p_max": 400.0}, ...],
      "wind_farms": [{"bus": 2, "capacity": 60.0}, ...]
    }

Units are MW for power, $/MWh for linear costs and $/MW^2h for quadratic
costs; reactances are in per-unit on any common base. Instead of ``lines``
with reactances a file may hold ``"ptdf": {"lines": [...], "limit": [...],
"matrix": [[...], ...]}`` with one row per line and one column per bus in
``buses`` order. Generators may give ``reg_up_cost`` and ``reg_dn_cost``
explicitly; otherwise they default to ``regulation`` factors times
``cost_lin``. Each bus hosts at most one generator and one wind farm. Buses
without a generator get unit placeholder quadratic costs, which never enter
a clearing since those buses carry no dispatch variables.

Dataset files are CSV with a ``timestamp`` column, either one ``power``
column shared by every farm or ``power_1 .. power_b`` (MW), and one column
per raw feature of the kernel configuration (``wind_speed`` in m/s,
``wind_direction`` in degrees clockwise from north, ``pitch_angle`` in
degrees).
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import InvariantViolation, MissingColumn, ParseError, SchemaError
from .features import Dataset, KernelConfig, feature_matrix
from .market import NetworkCase

CASE_SCHEMA = "regeq-case/1"
_PLACEHOLDER_QUAD = 1.0


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# network cases


def ptdf_from_reactance(n_bus: int, lines, slack: int) -> np.ndarray:
    """DC power transfer distribution factors.

    ``lines`` holds ``(from, to, reactance)`` with 0-based bus positions;
    injections at ``slack`` are balanced by the slack, so its column is zero.
    """
    m = len(lines)
    A = np.zeros((m, n_bus))
    x = np.empty(m)
    for l, (f, t, r) in enumerate(lines):
        A[l, f], A[l, t], x[l] = 1.0, -1.0, r
    Bl = A / x[:, None]
    B = A.T @ Bl
    keep = np.setdiff1d(np.arange(n_bus), [slack])
    F = np.zeros((m, n_bus))
    if keep.size:
        Bred = B[np.ix_(keep, keep)]
        if np.linalg.matrix_rank(Bred) < keep.size:
            raise InvariantViolation("network is not connected")
        F[:, keep] = np.linalg.solve(Bred.T, Bl[:, keep].T).T
    return F


class _Fields:
    """Typed field access with path-style error messages."""

    def __init__(self, data, path):
        if not isinstance(data, dict):
            raise SchemaError(f"{path}: expected an object")
        self.data, self.path = data, path

    def get(self, key, kind=float, default=...):
        if key not in self.data:
            if default is ...:
                raise SchemaError(f"{self.path}.{key}: required field missing")
            return default
        v = self.data[key]
        if kind is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
                raise SchemaError(f"{self.path}.{key}: expected a finite number, got {v!r}")
            return float(v)
        if kind is list and not isinstance(v, list):
            raise SchemaError(f"{self.path}.{key}: expected a list")
        return v

    def items(self, key, required=True):
        v = self.get(key, list, default=... if required else [])
        return [_Fields(e, f"{self.path}.{key}[{i}]") for i, e in enumerate(v)]


def parse_case(data: dict, source: str = "<case>") -> NetworkCase:
    """Build a validated :class:`NetworkCase` from a decoded case document."""
    root = _Fields(data, source)
    if root.get("schema", str) != CASE_SCHEMA:
        raise SchemaError(f"{source}.schema: expected {CASE_SCHEMA!r}")
    buses = root.items("buses")
    if not buses:
        raise SchemaError(f"{source}.buses: at least one bus required")
    ids = [b.get("id", object) for b in buses]
    if len(set(map(str, ids))) != len(ids):
        raise SchemaError(f"{source}.buses: duplicate bus id")
    pos = {str(i): k for k, i in enumerate(ids)}
    nb = len(ids)

    def bus_of(f, key="bus"):
        v = f.get(key, object)
        if str(v) not in pos:
            raise SchemaError(f"{f.path}.{key}: unknown bus {v!r}")
        return pos[str(v)]

    demand = np.array([b.get("demand", float, 0.0) for b in buses])
    shed_lin = np.array([b.get("shed_cost_lin", float, 1000.0) for b in buses])
    shed_quad = np.array([b.get("shed_cost_quad", float, 1.0) for b in buses])

    reg = _Fields(root.get("regulation", dict, {}), f"{source}.regulation")
    up_f, dn_f = reg.get("up_factor", float, None), reg.get("dn_factor", float, None)
    c = np.zeros(nb)
    C = np.full(nb, _PLACEHOLDER_QUAD)
    cu, cd, pmin, pmax = np.zeros(nb), np.zeros(nb), np.zeros(nb), np.zeros(nb)
    seen = set()
    for g in root.items("generators"):
        k = bus_of(g)
        if k in seen:
            raise SchemaError(f"{g.path}.bus: second generator at bus {ids[k]!r}")
        seen.add(k)
        c[k], C[k] = g.get("cost_lin"), g.get("cost_quad")
        pmin[k], pmax[k] = g.get("p_min", float, 0.0), g.get("p_max")
        for arr, key, factor in ((cu, "reg_up_cost", up_f), (cd, "reg_dn_cost", dn_f)):
            if key in g.data or factor is None:
                arr[k] = g.get(key)
            else:
                arr[k] = factor * c[k]

    farms = root.items("wind_farms")
    wind_bus = [bus_of(w) for w in farms]
    wind_cap = [w.get("capacity") for w in farms]

    if "ptdf" in data and "lines" in data:
        raise SchemaError(f"{source}: give either lines or ptdf, not both")
    if "ptdf" in data:
        blk = _Fields(data["ptdf"], f"{source}.ptdf")
        line_ids = blk.get("lines", list)
        limit = np.asarray(blk.get("limit", list), dtype=float)
        try:
            F = np.asarray(blk.get("matrix", list), dtype=float).reshape(len(line_ids), nb)
        except ValueError as exc:
            raise SchemaError(f"{source}.ptdf.matrix: expected {len(line_ids)} rows of {nb}") \
                from exc
        if limit.size != len(line_ids):
            raise SchemaError(f"{source}.ptdf.limit: expected {len(line_ids)} entries")
    else:
        lines = root.items("lines", required=False)
        line_ids = [ln.get("id", object, f"{i + 1}") for i, ln in enumerate(lines)]
        spec, limit = [], []
        for ln in lines:
            x = ln.get("reactance")
            if x <= 0:
                raise SchemaError(f"{ln.path}.reactance: must be positive")
            spec.append((bus_of(ln, "from"), bus_of(ln, "to"), x))
            limit.append(ln.get("limit"))
        slack = root.get("slack_bus", object, ids[0])
        if str(slack) not in pos:
            raise SchemaError(f"{source}.slack_bus: unknown bus {slack!r}")
        F = ptdf_from_reactance(nb, spec, pos[str(slack)])
        limit = np.asarray(limit, dtype=float)

    return NetworkCase(ptdf=F, line_limit=limit, demand=demand, gen_cost_lin=c,
                       gen_cost_quad=C, reg_up_cost=cu, reg_dn_cost=cd,
                       shed_cost_lin=shed_lin, shed_cost_quad=shed_quad, p_min=pmin,
                       p_max=pmax, wind_bus=wind_bus, wind_cap=wind_cap,
                       name=str(root.get("name", str, Path(source).stem)),
                       bus_ids=list(ids), line_ids=list(line_ids))


def load_case(path) -> NetworkCase:
    """Read and validate a case file; see the module docstring for the schema."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read case file ({exc.strerror})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_case(data, str(path))


def bundled_case(name: str) -> Path:
    """Path of a case shipped with the package (``one_bus``, ``three_bus``, ``rts24``)."""
    path = Path(__file__).parent / "cases" / f"{name}.json"
    if not path.exists():
        raise SchemaError(f"no bundled case named {name!r}")
    return path


# --------------------------------------------------------------------------
# datasets


def read_wind_csv(path, config: KernelConfig):
    """Raw columns of a dataset file: timestamps, power (n, b) in MW, features (n, r)."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ParseError(f"{path}: cannot read dataset ({exc.strerror})") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if "timestamp" not in header:
            raise MissingColumn(f"{path}: missing column 'timestamp'")
        if "power" in header:
            pcols = ["power"]
        else:
            found = {h for h in header if h.startswith("power_")}
            if not found:
                raise MissingColumn(f"{path}: missing column 'power' (or power_1..power_b)")
            pcols = [f"power_{j}" for j in range(1, len(found) + 1)]
            if set(pcols) != found:
                raise ParseError(f"{path}: power columns must be power_1..power_b")
        for name in config.names:
            if name not in header:
                raise MissingColumn(f"{path}: missing column {name!r}")
        stamps, power, raw = [], [], []
        for line, row in enumerate(reader, start=2):
            try:
                power.append([float(row[c]) for c in pcols])
                raw.append([float(row[c]) for c in config.names])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{line}: non-numeric value") from exc
            stamps.append(row["timestamp"])
    if not stamps:
        raise ParseError(f"{path}: no data rows")
    power, raw = np.asarray(power), np.asarray(raw)
    if not (np.all(np.isfinite(power)) and np.all(np.isfinite(raw))):
        raise ParseError(f"{path}: non-finite values")
    return tuple(stamps), power, raw


def load_dataset(path, config: KernelConfig, capacity) -> Dataset:
    """Kernel-transformed dataset with power normalized by farm capacity.

    ``capacity`` gives one MW rating per farm. A single ``power`` column is
    shared by all farms.
    """
    stamps, power, raw = read_wind_csv(path, config)
    cap = np.atleast_1d(np.asarray(capacity, dtype=float))
    if power.shape[1] == 1:
        power = np.repeat(power, cap.size, axis=1)
    if power.shape[1] != cap.size:
        raise ParseError(f"{path}: {power.shape[1]} power columns for {cap.size} farms")
    pu = power / cap
    if np.any(pu < -1e-9) or np.any(pu > 1 + 1e-9):
        raise ParseError(f"{path}: power outside [0, capacity]")
    return Dataset(feature_matrix(raw, config), np.clip(pu, 0.0, 1.0), None, stamps)

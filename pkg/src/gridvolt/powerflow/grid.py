"""Per-unit network model and the ``gridvolt-grid v1`` file format.

File layout::

    gridvolt-grid v1
    name = ieee13
    v_base_kv = 4.16
    s_base_kva = 1000
    v_slack = 1.0

    [buses]
    # name, type, p_kw, q_kvar      (nominal load columns are optional)
    sourcebus, slack
    650, pq, 0, 0

    [lines]
    # from, to, r_pu, x_pu
    sourcebus, 650, 0.002, 0.016

Only the branch list is stored. The reduced quantities ``Z`` and ``L`` are
always derived on load.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

GRID_HEADER = "gridvolt-grid v1"
BUNDLED = ("2bus", "ieee13", "ieee34", "ieee123")


class GridError(ValueError):
    """Invalid network description."""


class TopologyError(GridError):
    pass


class IllConditionedGridError(GridError):
    pass


class GridParseError(GridError):
    def __init__(self, msg, path=None, line=None):
        where = f"{path or '<grid>'}" + (f":{line}" if line is not None else "")
        super().__init__(f"{where}: {msg}")
        self.line = line


@dataclass(frozen=True)
class BusRecord:
    name: str
    kind: str = "pq"
    p_kw: float = 0.0
    q_kvar: float = 0.0


@dataclass(frozen=True)
class LineRecord:
    from_bus: str
    to_bus: str
    r_pu: float
    x_pu: float


@dataclass(frozen=True)
class BaseQuantities:
    v_base_kv: float = 1.0
    s_base_kva: float = 1000.0
    v_slack: float = 1.0


@dataclass(frozen=True, eq=False)
class GridModel:
    """Slack-reduced per-unit network.

    Index 0 of ``y_bus`` is the slack; ``z_vec``/``l_mat`` and every per-bus
    array elsewhere in the package cover the ``n_bus`` non-slack buses only.
    """

    name: str
    n_bus: int
    y_bus: np.ndarray
    z_vec: np.ndarray
    l_mat: np.ndarray
    v_base: float
    s_base: float
    bus_names: tuple
    p_nominal_kw: np.ndarray
    q_nominal_kvar: np.ndarray
    v_slack: float = 1.0
    records: tuple = field(default=(), repr=False)
    # real/imag views laid out for the sweep kernels
    z_re: np.ndarray = field(init=False, repr=False)
    z_im: np.ndarray = field(init=False, repr=False)
    lt_re: np.ndarray = field(init=False, repr=False)
    lt_im: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        put = object.__setattr__
        put(self, "z_re", np.ascontiguousarray(self.z_vec.real))
        put(self, "z_im", np.ascontiguousarray(self.z_vec.imag))
        put(self, "lt_re", np.ascontiguousarray(self.l_mat.real.T))
        put(self, "lt_im", np.ascontiguousarray(self.l_mat.imag.T))
        for a in (self.y_bus, self.z_vec, self.l_mat, self.z_re, self.z_im,
                  self.lt_re, self.lt_im, self.p_nominal_kw, self.q_nominal_kvar):
            a.flags.writeable = False

    @property
    def y_red(self) -> np.ndarray:
        return self.y_bus[1:, 1:]

    def reduction_residual(self) -> float:
        """``||L Y_red - I||_inf``."""
        eye = np.eye(self.n_bus)
        return float(np.abs(self.l_mat @ self.y_red - eye).max()) if self.n_bus else 0.0

    def bus_index(self, name: str) -> int:
        """Non-slack index of ``name``."""
        return self.bus_names.index(name)


def build_grid(buses, lines, base: BaseQuantities | None = None, name: str = "grid",
               cond_limit: float = 1e12) -> GridModel:
    """Assemble Y from branch records and derive Z and L by slack reduction."""
    base = base or BaseQuantities()
    buses = [b if isinstance(b, BusRecord) else BusRecord(*b) for b in buses]
    lines = [ln if isinstance(ln, LineRecord) else LineRecord(*ln) for ln in lines]
    slack = [b for b in buses if b.kind == "slack"]
    if len(slack) != 1:
        raise GridError(f"need exactly one slack bus, found {len(slack)}")
    for b in buses:
        if b.kind not in ("slack", "pq"):
            raise GridError(f"bus {b.name!r}: unknown type {b.kind!r}")
    ordered = slack + [b for b in buses if b.kind != "slack"]
    index = {}
    for k, b in enumerate(ordered):
        if b.name in index:
            raise GridError(f"duplicate bus {b.name!r}")
        index[b.name] = k
    n = len(ordered)

    y = np.zeros((n, n), dtype=complex)
    adj = [[] for _ in range(n)]
    for ln in lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in index:
                raise TopologyError(f"line {ln.from_bus}-{ln.to_bus}: unknown bus {end!r}")
        z = complex(ln.r_pu, ln.x_pu)
        if z == 0:
            raise GridError(f"line {ln.from_bus}-{ln.to_bus}: zero impedance")
        i, j = index[ln.from_bus], index[ln.to_bus]
        if i == j:
            raise TopologyError(f"line {ln.from_bus}-{ln.to_bus}: self loop")
        ys = 1.0 / z
        y[i, i] += ys
        y[j, j] += ys
        y[i, j] -= ys
        y[j, i] -= ys
        adj[i].append(j)
        adj[j].append(i)

    seen = {0}
    queue = deque([0])
    while queue:
        k = queue.popleft()
        for m in adj[k]:
            if m not in seen:
                seen.add(m)
                queue.append(m)
    if len(seen) != n:
        missing = sorted(ordered[k].name for k in range(n) if k not in seen)
        raise TopologyError(f"buses not connected to the slack: {missing}")

    y_red = y[1:, 1:]
    if n > 1:
        cond = np.linalg.cond(y_red)
        if not np.isfinite(cond) or cond > cond_limit:
            raise IllConditionedGridError(f"reduced admittance matrix condition {cond:.3g}")
        l_mat = np.linalg.inv(y_red)
    else:
        l_mat = np.zeros((0, 0), dtype=complex)
    z_vec = -(l_mat @ y[1:, 0]) * base.v_slack

    grid = GridModel(
        name=name,
        n_bus=n - 1,
        y_bus=y,
        z_vec=z_vec,
        l_mat=l_mat,
        v_base=base.v_base_kv * 1e3,
        s_base=base.s_base_kva * 1e3,
        bus_names=tuple(b.name for b in ordered[1:]),
        p_nominal_kw=np.array([b.p_kw for b in ordered[1:]], dtype=float),
        q_nominal_kvar=np.array([b.q_kvar for b in ordered[1:]], dtype=float),
        v_slack=base.v_slack,
        records=(tuple(ordered), tuple(lines), base),
    )
    resid = grid.reduction_residual()
    if resid >= 1e-9:
        raise IllConditionedGridError(f"reduction residual {resid:.3g} >= 1e-9")
    return grid


# -- file format ---------------------------------------------------------------

_BASE_KEYS = {"v_base_kv", "s_base_kva", "v_slack"}


def parse_grid(text: str, path=None) -> GridModel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != GRID_HEADER:
        got = lines[0].strip() if lines else ""
        if got.startswith("gridvolt-grid"):
            raise GridParseError(f"unsupported grid version {got!r}", path, 1)
        raise GridParseError(f"missing header {GRID_HEADER!r}", path, 1)
    meta = {}
    buses, branches = [], []
    section = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]").strip()
            if section not in ("buses", "lines"):
                raise GridParseError(f"unknown section [{section}]", path, lineno)
            continue
        if section is None:
            if "=" not in line:
                raise GridParseError("expected key = value", path, lineno)
            key, val = (s.strip() for s in line.split("=", 1))
            meta[key] = val
            continue
        fields = [f.strip() for f in line.split(",")]
        try:
            if section == "buses":
                if len(fields) not in (2, 4):
                    raise ValueError(f"bus row needs 2 or 4 fields, got {len(fields)}")
                extra = [float(f) for f in fields[2:]]
                buses.append(BusRecord(fields[0], fields[1], *extra))
            else:
                if len(fields) != 4:
                    raise ValueError(f"line row needs 4 fields, got {len(fields)}")
                branches.append(LineRecord(fields[0], fields[1], float(fields[2]), float(fields[3])))
        except ValueError as exc:
            raise GridParseError(f"[{section}] {exc}", path, lineno) from None
    try:
        base = BaseQuantities(**{k: float(v) for k, v in meta.items() if k in _BASE_KEYS})
    except ValueError as exc:
        raise GridParseError(f"bad base quantity: {exc}", path) from None
    try:
        return build_grid(buses, branches, base, name=meta.get("name", Path(str(path or "grid")).stem))
    except GridError as exc:
        raise GridParseError(str(exc), path) from exc


def load_grid(path) -> GridModel:
    """Load a grid file, or a bundled case by name (``"ieee13"``...)."""
    if str(path) in BUNDLED:
        ref = resources.files("gridvolt.powerflow") / "data" / f"{path}.grid"
        return parse_grid(ref.read_text(), path=f"{path}.grid")
    path = Path(path)
    return parse_grid(path.read_text(), path=path)


def format_grid(grid: GridModel) -> str:
    buses, branches, base = grid.records
    out = [GRID_HEADER, f"name = {grid.name}", f"v_base_kv = {base.v_base_kv!r}",
           f"s_base_kva = {base.s_base_kva!r}", f"v_slack = {base.v_slack!r}", "", "[buses]",
           "# name, type, p_kw, q_kvar"]
    out += [f"{b.name}, {b.kind}, {b.p_kw!r}, {b.q_kvar!r}" for b in buses]
    out += ["", "[lines]", "# from, to, r_pu, x_pu"]
    out += [f"{ln.from_bus}, {ln.to_bus}, {ln.r_pu!r}, {ln.x_pu!r}" for ln in branches]
    return "\n".join(out) + "\n"


def save_grid(grid: GridModel, path) -> None:
    Path(path).write_text(format_grid(grid))

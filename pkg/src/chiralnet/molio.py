"""Conformer records: parsing (SDF V2000, JSON-lines), serialization and
graph featurization.

The JSON-lines format is the canonical on-disk representation; one record
per line with keys emitted in a fixed order:

  {"graph_id": str, "stereoisomer_id": str,
   "atoms": [{"element", "charge", "h_count", "hybridization", "position"}],
   "bonds": [{"i", "j", "order", "conjugated"}],
   "labels": {"rs": "R"|"S"|null, "class": 0|1|null, "score": float|null}}

Atom/bond indices are 0-based, positions are Angstroms, floats are written
with 17 significant digits so a parse/write round trip is bit-faithful.
Ring membership is never serialized; it is recomputed from the graph.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

HYBRIDIZATIONS = ("sp", "sp2", "sp3", "other")
BOND_ORDERS = ("single", "double", "triple", "aromatic")

# symbol -> (atomic number, standard atomic weight)
PERIODIC_TABLE = {
    "H": (1, 1.008), "B": (5, 10.811), "C": (6, 12.011), "N": (7, 14.007),
    "O": (8, 15.999), "F": (9, 18.998), "Na": (11, 22.990), "Mg": (12, 24.305),
    "Al": (13, 26.982), "Si": (14, 28.085), "P": (15, 30.974), "S": (16, 32.06),
    "Cl": (17, 35.45), "K": (19, 39.098), "Ca": (20, 40.078), "Ti": (22, 47.867),
    "Cr": (24, 51.996), "Mn": (25, 54.938), "Fe": (26, 55.845), "Co": (27, 58.933),
    "Ni": (28, 58.693), "Cu": (29, 63.546), "Zn": (30, 65.38), "Ge": (32, 72.63),
    "As": (33, 74.922), "Se": (34, 78.971), "Br": (35, 79.904), "Sn": (50, 118.71),
    "Sb": (51, 121.76), "Te": (52, 127.60), "I": (53, 126.904), "Bi": (83, 208.98),
}


class MoleculeError(ValueError):
    """Invalid conformer data (graph or geometry invariant violated)."""


class SchemaError(ValueError):
    """JSON-lines record that violates the documented schema."""


@dataclass
class ParseError:
    """A recoverable problem in one SDF block; parsing continues."""

    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


@dataclass
class Atom:
    element: str
    atomic_number: int
    formal_charge: int
    position: np.ndarray  # (3,) float64, Angstroms
    implicit_hydrogens: int
    hybridization: str

    def validate(self, index: int):
        known = PERIODIC_TABLE.get(self.element)
        if known is None:
            raise MoleculeError(f"atom {index}: unknown element {self.element!r}")
        if self.atomic_number != known[0] or self.atomic_number < 1:
            raise MoleculeError(
                f"atom {index}: atomic number {self.atomic_number} does not match "
                f"element {self.element}"
            )
        if self.position.shape != (3,) or not np.all(np.isfinite(self.position)):
            raise MoleculeError(f"atom {index}: position must be 3 finite reals")
        if self.implicit_hydrogens < 0:
            raise MoleculeError(f"atom {index}: negative hydrogen count")
        if self.hybridization not in HYBRIDIZATIONS:
            raise MoleculeError(
                f"atom {index}: unknown hybridization {self.hybridization!r}"
            )


@dataclass
class Bond:
    i: int
    j: int
    order: str
    conjugated: bool = False
    in_ring: bool = False  # recomputed by Conformer


@dataclass
class Labels:
    rs: str | None = None
    class_label: int | None = None
    score: float | None = None


@dataclass
class Conformer:
    """A 2D molecular graph with 3D coordinates. Treat as immutable."""

    atoms: list[Atom]
    bonds: list[Bond]
    graph_id: str
    stereoisomer_id: str
    labels: Labels = field(default_factory=Labels)

    def __post_init__(self):
        for idx, atom in enumerate(self.atoms):
            atom.validate(idx)
        n = len(self.atoms)
        seen = set()
        for b in self.bonds:
            if b.i == b.j:
                raise MoleculeError(f"self-loop bond on atom {b.i}")
            if not (0 <= b.i < n and 0 <= b.j < n):
                raise MoleculeError(f"bond ({b.i}, {b.j}) references missing atom")
            if b.order not in BOND_ORDERS:
                raise MoleculeError(f"bond ({b.i}, {b.j}): unknown order {b.order!r}")
            if b.i > b.j:
                b.i, b.j = b.j, b.i
            key = (b.i, b.j)
            if key in seen:
                raise MoleculeError(f"parallel bond ({b.i}, {b.j})")
            seen.add(key)
        self.bonds.sort(key=lambda b: (b.i, b.j))
        if not _is_connected(n, self.bonds):
            raise MoleculeError("bond graph is not connected")
        for b, ring in zip(self.bonds, _ring_flags(n, self.bonds)):
            b.in_ring = ring

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def coords(self) -> np.ndarray:
        return np.array([a.position for a in self.atoms], dtype=np.float64)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.i].append(b.j)
            adj[b.j].append(b.i)
        return [sorted(nbrs) for nbrs in adj]

    def degrees(self) -> list[int]:
        deg = [0] * len(self.atoms)
        for b in self.bonds:
            deg[b.i] += 1
            deg[b.j] += 1
        return deg

    def with_coords(self, coords: np.ndarray, labels: Labels | None = None) -> "Conformer":
        atoms = [replace(a, position=np.array(p, dtype=np.float64)) for a, p in zip(self.atoms, coords)]
        bonds = [replace(b) for b in self.bonds]
        return Conformer(
            atoms, bonds, self.graph_id, self.stereoisomer_id,
            labels if labels is not None else replace(self.labels),
        )


def _is_connected(n: int, bonds: list[Bond]) -> bool:
    if n <= 1:
        return True
    adj: list[list[int]] = [[] for _ in range(n)]
    for b in bonds:
        adj[b.i].append(b.j)
        adj[b.j].append(b.i)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n


def _ring_flags(n: int, bonds: list[Bond]) -> list[bool]:
    """An edge lies on a cycle iff it is not a bridge (Tarjan low-links)."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for e, b in enumerate(bonds):
        adj[b.i].append((b.j, e))
        adj[b.j].append((b.i, e))
    visit = [0] * n
    low = [0] * n
    seen = [False] * n
    bridge = [False] * len(bonds)
    counter = [0]

    for root in range(n):
        if seen[root]:
            continue
        # iterative DFS: (node, parent edge, neighbor cursor)
        stack = [(root, -1, 0)]
        seen[root] = True
        counter[0] += 1
        visit[root] = low[root] = counter[0]
        while stack:
            u, pe, cursor = stack.pop()
            if cursor < len(adj[u]):
                stack.append((u, pe, cursor + 1))
                v, e = adj[u][cursor]
                if e == pe:
                    continue
                if seen[v]:
                    low[u] = min(low[u], visit[v])
                else:
                    seen[v] = True
                    counter[0] += 1
                    visit[v] = low[v] = counter[0]
                    stack.append((v, e, 0))
            elif pe >= 0:
                b = bonds[pe]
                parent = b.i if visit[b.i] < visit[b.j] else b.j
                low[parent] = min(low[parent], low[u])
                if low[u] > visit[parent]:
                    bridge[pe] = True
    return [not br for br in bridge]


def ring_bonds_bruteforce(conformer: Conformer) -> list[bool]:
    """Cycle membership by exhaustive simple-cycle search; test oracle for
    graphs with at most ~12 atoms."""
    n = conformer.n_atoms
    adj = conformer.neighbors()
    flags = []
    for b in conformer.bonds:
        # b closes a cycle iff j is reachable from i without using b
        seen = {b.i}
        stack = [b.i]
        found = False
        while stack and not found:
            u = stack.pop()
            for v in adj[u]:
                if u == b.i and v == b.j:
                    continue
                if u == b.j and v == b.i:
                    continue
                if v == b.j:
                    found = True
                    break
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        flags.append(found)
    assert n <= 12, "oracle intended for small graphs"
    return flags


# ---------------------------------------------------------------------------
# canonical ids


def _wl_colors(conformer: Conformer, rounds: int | None = None) -> list[int]:
    """Weisfeiler-Lehman refinement colors; canonical for the tree-shaped
    molecules this toolkit generates."""
    atoms = conformer.atoms
    adj = conformer.neighbors()
    orders = {}
    for b in conformer.bonds:
        orders[(b.i, b.j)] = b.order
        orders[(b.j, b.i)] = b.order
    colors = [
        hash((a.element, a.formal_charge, a.implicit_hydrogens, a.hybridization))
        for a in atoms
    ]
    for _ in range(rounds if rounds is not None else max(1, len(atoms))):
        colors = [
            hash((c, tuple(sorted((colors[v], orders[(u, v)]) for v in adj[u]))))
            for u, c in enumerate(colors)
        ]
    return colors


def graph_hash(conformer: Conformer) -> str:
    """Deterministic key of the 2D graph (ignores coordinates and labels)."""
    colors = _wl_colors(conformer)
    payload = repr(
        (
            sorted(colors),
            sorted(
                (min(colors[b.i], colors[b.j]), max(colors[b.i], colors[b.j]), b.order)
                for b in conformer.bonds
            ),
        )
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def stereoisomer_hash(conformer: Conformer) -> str:
    """Graph hash refined with tetrahedral parity signatures.

    For every atom with four orientable neighbor directions (four heavy
    neighbors with distinct WL colors, or three plus one implicit H), the
    sign of the oriented volume of the neighbor directions is recorded.
    The signature is stable under bond rotations and flips under mirror
    reflection, so the two enantiomers of a graph receive distinct keys.
    """
    colors = _wl_colors(conformer)
    adj = conformer.neighbors()
    coords = conformer.coords()
    signature = []
    for u, atom in enumerate(conformer.atoms):
        nbrs = adj[u]
        dirs: list[tuple[int, np.ndarray]] = []
        if len(nbrs) == 4:
            dirs = [(colors[v], coords[v] - coords[u]) for v in nbrs]
        elif len(nbrs) == 3 and atom.implicit_hydrogens == 1:
            dirs = [(colors[v], coords[v] - coords[u]) for v in nbrs]
            units = [d / np.linalg.norm(d) for _, d in dirs]
            dirs.append((hash("implicit-H"), -sum(units)))
        else:
            continue
        keys = [c for c, _ in dirs]
        if len(set(keys)) != 4:
            continue
        ordered = [d for _, d in sorted(dirs, key=lambda t: t[0])]
        det = float(np.linalg.det(np.stack([
            ordered[0] - ordered[3], ordered[1] - ordered[3], ordered[2] - ordered[3],
        ])))
        if abs(det) < 1e-8:
            continue
        signature.append((colors[u], 1 if det > 0 else -1))
    payload = graph_hash(conformer) + repr(sorted(signature))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# SDF (V2000) reading

_SDF_CHARGE_CODES = {0: 0, 1: 3, 2: 2, 3: 1, 5: -1, 6: -2, 7: -3}
_BOND_TYPE_CODES = {1: "single", 2: "double", 3: "triple", 4: "aromatic"}


def _infer_hybridization(heavy_degree: int, h_count: int) -> str:
    total = heavy_degree + h_count
    if total >= 4:
        return "sp3"
    if total == 3:
        return "sp2"
    if total == 2:
        return "sp"
    return "other"


@dataclass
class SdfResult:
    conformers: list[Conformer]
    errors: list[ParseError]


def parse_sdf(text: str) -> SdfResult:
    """Read zero or more V2000 molfile blocks separated by `$$$$`.

    Explicit hydrogens are folded into the bonded heavy atom's implicit
    count and removed from the graph. Malformed blocks are reported with
    their line number and skipped; parsing continues with the next block.
    """
    lines = text.splitlines()
    conformers: list[Conformer] = []
    errors: list[ParseError] = []
    start = 0
    while start < len(lines):
        # skip trailing blank lines between records
        while start < len(lines) and not lines[start].strip() and not any(
            l.strip() for l in lines[start:]
        ):
            start = len(lines)
        if start >= len(lines):
            break
        end = start
        while end < len(lines) and lines[end].strip() != "$$$$":
            end += 1
        block = lines[start:end]
        if any(l.strip() for l in block):
            conf = _parse_molfile(block, start, errors)
            if conf is not None:
                conformers.append(conf)
        start = end + 1
    return SdfResult(conformers, errors)


def _parse_molfile(block: list[str], offset: int, errors: list[ParseError]):
    def fail(rel_line: int, message: str):
        errors.append(ParseError(offset + rel_line + 1, message))
        return None

    if len(block) < 4:
        return fail(0, "malformed counts line: block too short")
    title = block[0].strip()
    counts = block[3]
    try:
        n_atoms = int(counts[0:3])
        n_bonds = int(counts[3:6])
    except ValueError:
        parts = counts.split()
        try:
            n_atoms, n_bonds = int(parts[0]), int(parts[1])
        except (ValueError, IndexError):
            return fail(3, f"malformed counts line: {counts!r}")
    if n_atoms < 1 or len(block) < 4 + n_atoms + n_bonds:
        return fail(3, "malformed counts line: atom/bond blocks truncated")

    elements: list[str] = []
    positions: list[np.ndarray] = []
    charges: list[int] = []
    for a in range(n_atoms):
        line_no = 4 + a
        line = block[line_no]
        try:
            x = float(line[0:10])
            y = float(line[10:20])
            z = float(line[20:30])
        except (ValueError, IndexError):
            return fail(line_no, f"malformed atom coordinates: {line!r}")
        symbol = line[31:34].strip() if len(line) > 31 else ""
        if symbol != "H" and symbol not in PERIODIC_TABLE:
            return fail(line_no, f"unknown element symbol {symbol!r}")
        code = 0
        if len(line) >= 39:
            try:
                code = int(line[36:39])
            except ValueError:
                code = 0
        elements.append(symbol)
        positions.append(np.array([x, y, z], dtype=np.float64))
        charges.append(_SDF_CHARGE_CODES.get(code, 0))

    raw_bonds: list[tuple[int, int, str]] = []
    for b in range(n_bonds):
        line_no = 4 + n_atoms + b
        line = block[line_no]
        try:
            bi = int(line[0:3])
            bj = int(line[3:6])
            btype = int(line[6:9])
        except (ValueError, IndexError):
            return fail(line_no, f"malformed bond line: {line!r}")
        if not (1 <= bi <= n_atoms and 1 <= bj <= n_atoms):
            return fail(line_no, f"atom index out of range: bond ({bi}, {bj})")
        order = _BOND_TYPE_CODES.get(btype)
        if order is None:
            return fail(line_no, f"unsupported bond type code {btype}")
        raw_bonds.append((bi - 1, bj - 1, order))

    # property block: only M  CHG is honored (it overrides charge codes)
    for rel in range(4 + n_atoms + n_bonds, len(block)):
        line = block[rel]
        if line.startswith("M  CHG"):
            fields = line.split()
            try:
                count = int(fields[2])
                pairs = fields[3 : 3 + 2 * count]
                charges = [0] * n_atoms
                for k in range(count):
                    charges[int(pairs[2 * k]) - 1] = int(pairs[2 * k + 1])
            except (ValueError, IndexError):
                return fail(rel, f"malformed M  CHG line: {line!r}")
        if line.startswith("M  END"):
            break

    # fold explicit hydrogens into their heavy partner
    h_counts = [0] * n_atoms
    is_h = [el == "H" for el in elements]
    for bi, bj, _ in raw_bonds:
        if is_h[bi] and is_h[bj]:
            return fail(3, "H-H bond unsupported (all-hydrogen fragment)")
        if is_h[bi]:
            h_counts[bj] += 1
        elif is_h[bj]:
            h_counts[bi] += 1
    keep = [i for i in range(n_atoms) if not is_h[i]]
    if not keep:
        return fail(3, "molecule has no heavy atoms")
    remap = {old: new for new, old in enumerate(keep)}
    heavy_bonds = [
        Bond(remap[bi], remap[bj], order)
        for bi, bj, order in raw_bonds
        if not is_h[bi] and not is_h[bj]
    ]
    heavy_deg = [0] * len(keep)
    for b in heavy_bonds:
        heavy_deg[b.i] += 1
        heavy_deg[b.j] += 1
    atoms = []
    for new, old in enumerate(keep):
        el = elements[old]
        atoms.append(
            Atom(
                element=el,
                atomic_number=PERIODIC_TABLE[el][0],
                formal_charge=charges[old],
                position=positions[old],
                implicit_hydrogens=h_counts[old],
                hybridization=_infer_hybridization(heavy_deg[new], h_counts[old]),
            )
        )

    tokens = title.split()
    try:
        conf = Conformer(atoms, heavy_bonds, graph_id="", stereoisomer_id="")
    except MoleculeError as exc:
        return fail(3, str(exc))
    if len(tokens) >= 2:
        conf.graph_id, conf.stereoisomer_id = tokens[0], tokens[1]
    elif len(tokens) == 1:
        conf.graph_id = graph_hash(conf)
        conf.stereoisomer_id = tokens[0]
    else:
        conf.graph_id = graph_hash(conf)
        conf.stereoisomer_id = stereoisomer_hash(conf)
    return conf


# ---------------------------------------------------------------------------
# JSON-lines format


def _f17(x: float) -> str:
    """17 significant digits: enough for an exact float64 round trip."""
    return format(float(x), ".17g")


def _atom_json(a: Atom) -> str:
    pos = ",".join(_f17(c) for c in a.position)
    return (
        f'{{"element":{json.dumps(a.element)},"charge":{a.formal_charge},'
        f'"h_count":{a.implicit_hydrogens},'
        f'"hybridization":{json.dumps(a.hybridization)},"position":[{pos}]}}'
    )


def _bond_json(b: Bond) -> str:
    conj = "true" if b.conjugated else "false"
    return f'{{"i":{b.i},"j":{b.j},"order":{json.dumps(b.order)},"conjugated":{conj}}}'


def write_dataset_json(records) -> str:
    """Serialize conformers, one JSON object per newline-terminated line."""
    lines = []
    for c in records:
        rs = json.dumps(c.labels.rs)
        cls = "null" if c.labels.class_label is None else str(int(c.labels.class_label))
        score = "null" if c.labels.score is None else _f17(c.labels.score)
        lines.append(
            f'{{"graph_id":{json.dumps(c.graph_id)},'
            f'"stereoisomer_id":{json.dumps(c.stereoisomer_id)},'
            f'"atoms":[{",".join(_atom_json(a) for a in c.atoms)}],'
            f'"bonds":[{",".join(_bond_json(b) for b in c.bonds)}],'
            f'"labels":{{"rs":{rs},"class":{cls},"score":{score}}}}}\n'
        )
    return "".join(lines)


def parse_dataset_json(text: str) -> list[Conformer]:
    """Parse the JSON-lines format; schema violations raise SchemaError
    naming the offending line and key. Unknown keys are ignored."""
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {line_no}: invalid JSON ({exc.msg})") from None
        records.append(_record_from_obj(obj, line_no))
    return records


def _need(obj: dict, key: str, line_no: int, ctx: str = "record"):
    if key not in obj:
        raise SchemaError(f"line {line_no}: {ctx} missing key {key!r}")
    return obj[key]


def _record_from_obj(obj, line_no: int) -> Conformer:
    if not isinstance(obj, dict):
        raise SchemaError(f"line {line_no}: record must be a JSON object")
    gid = _need(obj, "graph_id", line_no)
    sid = _need(obj, "stereoisomer_id", line_no)
    atoms_raw = _need(obj, "atoms", line_no)
    bonds_raw = _need(obj, "bonds", line_no)
    if not isinstance(atoms_raw, list) or not atoms_raw:
        raise SchemaError(f"line {line_no}: 'atoms' must be a nonempty array")
    if not isinstance(bonds_raw, list):
        raise SchemaError(f"line {line_no}: 'bonds' must be an array")
    bonds = []
    for b in bonds_raw:
        i = _need(b, "i", line_no, "bond")
        j = _need(b, "j", line_no, "bond")
        order = _need(b, "order", line_no, "bond")
        if not isinstance(i, int) or not isinstance(j, int):
            raise SchemaError(f"line {line_no}: bond key 'i'/'j' must be integers")
        if order not in BOND_ORDERS:
            raise SchemaError(f"line {line_no}: bond key 'order' has unknown value {order!r}")
        if not (0 <= i < len(atoms_raw) and 0 <= j < len(atoms_raw)):
            raise SchemaError(f"line {line_no}: bond key 'i'/'j' out of range")
        bonds.append(Bond(i, j, order, bool(b.get("conjugated", False))))
    atoms = []
    for idx, a in enumerate(atoms_raw):
        element = _need(a, "element", line_no, f"atom {idx}")
        if element not in PERIODIC_TABLE:
            raise SchemaError(f"line {line_no}: atom key 'element' unknown: {element!r}")
        pos = _need(a, "position", line_no, f"atom {idx}")
        if not isinstance(pos, list) or len(pos) != 3:
            raise SchemaError(f"line {line_no}: atom key 'position' must have 3 components")
        hyb = a.get("hybridization", "other")
        if hyb not in HYBRIDIZATIONS:
            raise SchemaError(f"line {line_no}: atom key 'hybridization' unknown: {hyb!r}")
        atoms.append(
            Atom(
                element=element,
                atomic_number=PERIODIC_TABLE[element][0],
                formal_charge=int(a.get("charge", 0)),
                position=np.array(pos, dtype=np.float64),
                implicit_hydrogens=int(a.get("h_count", 0)),
                hybridization=hyb,
            )
        )
    labels_raw = obj.get("labels") or {}
    labels = Labels(
        rs=labels_raw.get("rs"),
        class_label=labels_raw.get("class"),
        score=labels_raw.get("score"),
    )
    if labels.rs not in (None, "R", "S"):
        raise SchemaError(f"line {line_no}: labels key 'rs' must be 'R', 'S' or null")
    try:
        return Conformer(atoms, bonds, gid, sid, labels)
    except MoleculeError as exc:
        raise SchemaError(f"line {line_no}: {exc}") from None


def conformers_identical(a: Conformer, b: Conformer) -> bool:
    """Bit-exact equality, coordinates included."""
    if (a.graph_id, a.stereoisomer_id) != (b.graph_id, b.stereoisomer_id):
        return False
    if (a.labels.rs, a.labels.class_label) != (b.labels.rs, b.labels.class_label):
        return False
    sa, sb = a.labels.score, b.labels.score
    if (sa is None) != (sb is None) or (sa is not None and sa != sb):
        return False
    if len(a.atoms) != len(b.atoms) or len(a.bonds) != len(b.bonds):
        return False
    for x, y in zip(a.atoms, b.atoms):
        if (x.element, x.formal_charge, x.implicit_hydrogens, x.hybridization) != (
            y.element, y.formal_charge, y.implicit_hydrogens, y.hybridization,
        ):
            return False
        if not np.array_equal(x.position, y.position):
            return False
    for x, y in zip(a.bonds, b.bonds):
        if (x.i, x.j, x.order, x.conjugated) != (y.i, y.j, y.order, y.conjugated):
            return False
    return True


# ---------------------------------------------------------------------------
# featurization


# Bond-order vocabulary is wider than the parser's four orders so that the
# default edge width lands on 14 (order one-hot + conjugated + in_ring),
# mirroring the bond-type lists of mainstream cheminformatics toolkits.
DEFAULT_BOND_ORDER_VOCAB = (
    "single", "double", "triple", "quadruple", "aromatic", "one_and_a_half",
    "two_and_a_half", "three_and_a_half", "dative", "ionic", "hydrogen", "other",
)

DEFAULT_ELEMENTS = tuple(sym for sym in PERIODIC_TABLE if sym != "H")  # 31 symbols


@dataclass(frozen=True)
class FeatureConfig:
    """Vocabularies for the one-hot blocks. Defaults produce node width 52
    and edge width 14."""

    elements: tuple[str, ...] = DEFAULT_ELEMENTS
    charges: tuple[int, ...] = (-2, -1, 0, 1, 2)
    degrees: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    h_counts: tuple[int, ...] = (0, 1, 2, 3, 4)
    hybridizations: tuple[str, ...] = HYBRIDIZATIONS
    bond_orders: tuple[str, ...] = DEFAULT_BOND_ORDER_VOCAB
    include_chiral_tags: bool = False

    @property
    def node_width(self) -> int:
        width = (
            1
            + len(self.elements)
            + len(self.charges)
            + len(self.degrees)
            + len(self.h_counts)
            + len(self.hybridizations)
        )
        if self.include_chiral_tags:
            width += 3  # none / R / S
        return width

    @property
    def edge_width(self) -> int:
        width = len(self.bond_orders) + 2
        if self.include_chiral_tags:
            width += 2  # reserved bond-stereo block (always "none" here)
        return width

    def to_dict(self) -> dict:
        return {
            "elements": list(self.elements),
            "charges": list(self.charges),
            "degrees": list(self.degrees),
            "h_counts": list(self.h_counts),
            "hybridizations": list(self.hybridizations),
            "bond_orders": list(self.bond_orders),
            "include_chiral_tags": self.include_chiral_tags,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kwargs)


@dataclass
class FeaturizedGraph:
    node_features: np.ndarray  # (n_atoms, node_width)
    edge_features: np.ndarray  # (n_bonds, edge_width)
    feature_config: FeatureConfig


class FeaturizationError(ValueError):
    """A value fell outside the configured vocabularies."""


def _one_hot(value, vocab, atom_index, field_name):
    try:
        pos = vocab.index(value)
    except ValueError:
        raise FeaturizationError(
            f"atom {atom_index}: {field_name} value {value!r} not in vocabulary"
        ) from None
    row = np.zeros(len(vocab), dtype=np.float64)
    row[pos] = 1.0
    return row


def featurize(
    conformer: Conformer,
    config: FeatureConfig = FeatureConfig(),
    chiral_tags: dict[int, str] | None = None,
) -> FeaturizedGraph:
    """Build node rows [mass] + one-hots of element/charge/degree/H-count/
    hybridization, and edge rows one-hot(order) + [conjugated, in_ring].

    Degree counts heavy-atom neighbors only. The mass scalar is scaled by
    0.01 to keep it commensurate with the one-hot blocks. When
    `include_chiral_tags` is set, a none/R/S one-hot (from `chiral_tags`,
    keyed by atom index) and a reserved 2-wide bond-stereo block are
    appended; both are all-"none" unless tags are supplied.
    """
    degrees = conformer.degrees()
    node_rows = []
    for idx, atom in enumerate(conformer.atoms):
        mass = PERIODIC_TABLE[atom.element][1] * 0.01
        blocks = [
            np.array([mass]),
            _one_hot(atom.element, config.elements, idx, "element"),
            _one_hot(atom.formal_charge, config.charges, idx, "charge"),
            _one_hot(degrees[idx], config.degrees, idx, "degree"),
            _one_hot(atom.implicit_hydrogens, config.h_counts, idx, "h_count"),
            _one_hot(atom.hybridization, config.hybridizations, idx, "hybridization"),
        ]
        if config.include_chiral_tags:
            tag = (chiral_tags or {}).get(idx)
            blocks.append(_one_hot(tag if tag in ("R", "S") else None,
                                   (None, "R", "S"), idx, "chiral_tag"))
        node_rows.append(np.concatenate(blocks))
    edge_rows = []
    for b in conformer.bonds:
        blocks = [
            _one_hot(b.order, config.bond_orders, b.i, "bond order"),
            np.array([1.0 if b.conjugated else 0.0, 1.0 if b.in_ring else 0.0]),
        ]
        if config.include_chiral_tags:
            blocks.append(np.array([1.0, 0.0]))  # bond stereo: always "none"
        edge_rows.append(np.concatenate(blocks))
    node = np.array(node_rows, dtype=np.float64)
    edge = (
        np.array(edge_rows, dtype=np.float64)
        if edge_rows
        else np.zeros((0, config.edge_width))
    )
    assert node.shape[1] == config.node_width
    return FeaturizedGraph(node, edge, config)

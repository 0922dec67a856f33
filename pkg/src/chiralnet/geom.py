"""Internal coordinates, conformer transforms and a geometric R/S oracle.

Torsion sign convention (fixed here, documented once): for a path
(i, x, y, j) with b1 = p_x - p_i, b2 = p_y - p_x, b3 = p_j - p_y,
n1 = b1 x b2, n2 = b2 x b3, m = n1 x (b2/|b2|),

    psi = atan2(m . n2, n1 . n2)  in (-pi, pi].

Under this convention mirror reflection negates every torsion, reversing
the path preserves the value, and `rotate_bond(x, y, angle)` adds +angle
(mod 2 pi) to every torsion whose middle bond is (x, y).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .molio import PERIODIC_TABLE, Conformer, Labels

TWO_PI = 2.0 * np.pi


class GeometryError(ValueError):
    """Degenerate geometry or an invalid transform request."""


# ---------------------------------------------------------------------------
# scalar measurements


def distance(positions: np.ndarray, i: int, j: int) -> float:
    if i == j:
        raise GeometryError("distance requires distinct atom indices")
    return float(kernels.bond_distances(positions, np.array([[i, j]], dtype=np.int64))[0])


def bond_angle(positions: np.ndarray, i: int, j: int, k: int) -> float:
    """Angle at apex j, in [0, pi]."""
    if len({i, j, k}) != 3:
        raise GeometryError("angle requires three distinct atom indices")
    val = float(kernels.bend_angles(positions, np.array([[i, j, k]], dtype=np.int64))[0])
    if np.isnan(val):
        raise GeometryError(f"degenerate angle at atoms ({i}, {j}, {k})")
    return val


def dihedral(positions: np.ndarray, path: tuple[int, int, int, int]) -> float:
    """Signed torsion for the path (i, x, y, j), in (-pi, pi]."""
    quad = np.array([path], dtype=np.int64)
    val = float(kernels.dihedral_angles(positions, quad)[0])
    if np.isnan(val):
        raise GeometryError(f"undefined torsion for path {tuple(path)}")
    return val


def wrap_angle(angle: float) -> float:
    """Wrap into (-pi, pi]."""
    wrapped = (angle + np.pi) % TWO_PI - np.pi
    if wrapped == -np.pi:
        wrapped = np.pi
    return wrapped


# ---------------------------------------------------------------------------
# internal coordinates


@dataclass
class CoupledTorsionSet:
    """All torsions sharing the internal bond (x, y), oriented x < y and
    listed in lexicographic (i, j) order."""

    bond: tuple[int, int]
    pairs: np.ndarray   # (t, 2) outer atoms (i, j)
    angles: np.ndarray  # (t,) torsions psi_ixyj

    def quads(self) -> np.ndarray:
        t = len(self.pairs)
        x, y = self.bond
        out = np.empty((t, 4), dtype=np.int64)
        out[:, 0] = self.pairs[:, 0]
        out[:, 1] = x
        out[:, 2] = y
        out[:, 3] = self.pairs[:, 1]
        return out


@dataclass
class InternalCoordinates:
    bond_pairs: np.ndarray      # (m, 2)
    bond_lengths: np.ndarray    # (m,)
    angle_triples: np.ndarray   # (a, 3) apex in the middle
    angle_values: np.ndarray    # (a,)
    torsion_groups: list[CoupledTorsionSet]


def enumerate_internal_coords(conformer: Conformer) -> InternalCoordinates:
    """All bond distances, all unique bonded angle triples, and one coupled
    torsion set per internal bond (both endpoints of degree >= 2)."""
    if conformer.n_atoms < 2:
        raise GeometryError("need at least two atoms")
    positions = conformer.coords()
    adj = conformer.neighbors()

    bond_pairs = np.array([[b.i, b.j] for b in conformer.bonds], dtype=np.int64)
    bond_lengths = kernels.bond_distances(positions, bond_pairs)
    if np.any(bond_lengths <= 0):
        raise GeometryError("coincident bonded atoms")

    triples = []
    for j, nbrs in enumerate(adj):
        for a in range(len(nbrs)):
            for b in range(a + 1, len(nbrs)):
                triples.append((nbrs[a], j, nbrs[b]))
    triples.sort()
    angle_triples = (
        np.array(triples, dtype=np.int64) if triples else np.zeros((0, 3), dtype=np.int64)
    )
    angle_values = kernels.bend_angles(positions, angle_triples)
    bad = np.isnan(angle_values)
    if bad.any():
        i, j, k = angle_triples[int(np.argmax(bad))]
        raise GeometryError(f"degenerate angle at atoms ({i}, {j}, {k})")

    groups = []
    for b in conformer.bonds:
        x, y = b.i, b.j  # bonds are stored with i < j
        others_x = [u for u in adj[x] if u != y]
        others_y = [v for v in adj[y] if v != x]
        if not others_x or not others_y:
            continue
        pairs = np.array(
            [(i, j) for i in sorted(others_x) for j in sorted(others_y)],
            dtype=np.int64,
        )
        group = CoupledTorsionSet(bond=(x, y), pairs=pairs, angles=np.zeros(len(pairs)))
        psi = kernels.dihedral_angles(positions, group.quads())
        if np.isnan(psi).any():
            t = int(np.argmax(np.isnan(psi)))
            raise GeometryError(
                f"undefined torsion for path {tuple(group.quads()[t])}"
            )
        group.angles = psi
        groups.append(group)
    return InternalCoordinates(bond_pairs, bond_lengths, angle_triples, angle_values, groups)


# ---------------------------------------------------------------------------
# transforms


@dataclass
class RigidMotion:
    rotation: np.ndarray     # (3, 3), orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        if q.shape != (3, 3) or np.abs(q.T @ q - np.eye(3)).max() > 1e-10:
            raise GeometryError("rigid rotation must be orthonormal")
        if abs(np.linalg.det(q) - 1.0) > 1e-10:
            raise GeometryError("rigid rotation must have determinant +1")
        self.rotation = q
        self.translation = np.asarray(self.translation, dtype=np.float64)


@dataclass
class Reflection:
    normal: np.ndarray  # plane through the origin

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise GeometryError("reflection requires a nonzero plane normal")
        self.normal = n / norm


@dataclass
class BondRotation:
    x: int
    y: int
    angle: float


Transform = RigidMotion | Reflection | BondRotation


def random_rigid(rng: np.random.Generator, translation_scale: float = 5.0) -> RigidMotion:
    """Uniform-ish random rotation (QR of a Gaussian matrix) plus translation."""
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return RigidMotion(q, rng.normal(scale=translation_scale, size=3))


def _bond_lookup(conformer: Conformer, x: int, y: int):
    for b in conformer.bonds:
        if (b.i, b.j) == (min(x, y), max(x, y)):
            return b
    raise GeometryError(f"no bond between atoms {x} and {y}")


def transform_conformer(conformer: Conformer, t: Transform) -> Conformer:
    """Apply a rigid motion, mirror reflection, or internal bond rotation.

    Graph, ids and labels are preserved, except that reflection swaps the
    R/S label. Bond rotation is rejected for ring bonds.
    """
    positions = conformer.coords()
    labels = replace(conformer.labels)
    if isinstance(t, RigidMotion):
        new = kernels.rigid_transform(positions, t.rotation, t.translation)
    elif isinstance(t, Reflection):
        new = kernels.reflect_through_plane(positions, t.normal)
        if labels.rs == "R":
            labels.rs = "S"
        elif labels.rs == "S":
            labels.rs = "R"
    elif isinstance(t, BondRotation):
        bond = _bond_lookup(conformer, t.x, t.y)
        if bond.in_ring:
            raise GeometryError("bond rotation requires acyclic bond")
        moving = _component_beyond(conformer, t.x, t.y)
        # Axis oriented x<-y so a positive angle adds +angle to every torsion
        # of the (x, y) coupled set under this module's sign convention.
        axis = positions[t.x] - positions[t.y]
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            raise GeometryError("coincident bond endpoints")
        new = kernels.rotate_about_axis(
            positions, moving, positions[t.x], axis / norm, float(t.angle)
        )
    else:
        raise GeometryError(f"unknown transform {t!r}")
    return conformer.with_coords(new, labels)


def _component_beyond(conformer: Conformer, x: int, y: int) -> np.ndarray:
    """Atoms reachable from y with the edge (x, y) removed, excluding y
    itself (y lies on the rotation axis)."""
    adj = conformer.neighbors()
    seen = {x, y}
    stack = [y]
    out = []
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if u == y and v == x:
                continue
            if v not in seen:
                seen.add(v)
                out.append(v)
                stack.append(v)
    return np.array(sorted(out), dtype=np.int64)


# ---------------------------------------------------------------------------
# R/S oracle


def _substituent_key(conformer: Conformer, start: int, center: int):
    """Sphere-wise priority key for the substituent entered via `start`:
    per sphere, the descending atomic numbers of the frontier (implicit
    hydrogens contribute Z=1 entries). Compared lexicographically."""
    adj = conformer.neighbors()
    atoms = conformer.atoms
    spheres = [(atoms[start].atomic_number,)]
    frontier = [start]
    visited = {center, start}
    while frontier:
        entries = []
        nxt = []
        for u in frontier:
            entries.extend([1] * atoms[u].implicit_hydrogens)
            for v in adj[u]:
                if v not in visited:
                    visited.add(v)
                    nxt.append(v)
                    entries.append(atoms[v].atomic_number)
        if entries:
            spheres.append(tuple(sorted(entries, reverse=True)))
        frontier = nxt
    return tuple(spheres)


def assign_rs_label(conformer: Conformer, center: int) -> str:
    """Handedness of a tetrahedral center with four substituents of
    strictly ordered priority.

    A degree-3 center with one implicit hydrogen gets a virtual H placed
    opposite the sum of the three unit neighbor directions at 1.09 A.
    Returns "R" when substituents 1 -> 2 -> 3 (by descending priority) turn
    clockwise viewed from the side opposite substituent 4, i.e. when
    det[v1 - v4, v2 - v4, v3 - v4] < 0.
    """
    adj = conformer.neighbors()
    atoms = conformer.atoms
    nbrs = adj[center]
    positions = conformer.coords()
    entries: list[tuple[tuple, np.ndarray]] = []
    if len(nbrs) == 4:
        entries = [(_substituent_key(conformer, v, center), positions[v]) for v in nbrs]
    elif len(nbrs) == 3 and atoms[center].implicit_hydrogens == 1:
        entries = [(_substituent_key(conformer, v, center), positions[v]) for v in nbrs]
        units = []
        for v in nbrs:
            d = positions[v] - positions[center]
            norm = np.linalg.norm(d)
            if norm < 1e-12:
                raise GeometryError("coincident neighbor at stereocenter")
            units.append(d / norm)
        direction = -sum(units)
        dn = np.linalg.norm(direction)
        if dn < 1e-12:
            raise GeometryError("degenerate virtual hydrogen direction")
        entries.append((((1,),), positions[center] + 1.09 * direction / dn))
    else:
        raise GeometryError(
            f"atom {center} is not a four-substituent center "
            f"(degree {len(nbrs)}, {atoms[center].implicit_hydrogens} implicit H)"
        )
    keys = [k for k, _ in entries]
    if len(set(keys)) != 4:
        raise GeometryError("not a stereocenter under implemented priority rules")
    ordered = [pos for _, pos in sorted(entries, key=lambda e: e[0], reverse=True)]
    v = [p - positions[center] for p in ordered]
    det = float(np.linalg.det(np.stack([v[0] - v[3], v[1] - v[3], v[2] - v[3]])))
    if abs(det) < 1e-10:
        raise GeometryError("degenerate (near-planar) stereocenter geometry")
    return "R" if det < 0 else "S"


def find_stereocenters(conformer: Conformer) -> list[int]:
    """Atom indices where the R/S oracle succeeds."""
    centers = []
    for idx in range(conformer.n_atoms):
        try:
            assign_rs_label(conformer, idx)
        except GeometryError:
            continue
        centers.append(idx)
    return centers

"""Synthetic datasets of enantiomer pairs.

Each 2D graph is a tree: one sp3 carbon stereocenter bearing four distinct
substituents drawn from a template pool (halogens plus short heavy-atom
chains), placed at ideal tetrahedral directions with tabulated bond
lengths. The mirror form is the reflection through the xy-plane; R/S
labels always come from the geometric oracle, never by construction.
Conformers of a stereoisomer differ by random rotations of every
rotatable bond plus small Gaussian jitter.

Scores for the ranking task are chirality-signed: both enantiomers share
a graph-level base value and are split by half the pair's score gap, so
the task is exactly learnable for a mirror-sensitive model and exactly
unlearnable for a mirror-blind one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import geom
from .molio import PERIODIC_TABLE, Atom, Bond, Conformer, Labels

TETRA_ANGLE = float(np.arccos(-1.0 / 3.0))  # 109.47 degrees

# unit vectors with pairwise angle arccos(-1/3)
TETRA_DIRS = np.array(
    [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
) / np.sqrt(3.0)

DEFAULT_BOND_LENGTHS = {
    frozenset(("C", "C")): 1.54,
    frozenset(("C", "N")): 1.47,
    frozenset(("C", "O")): 1.43,
    frozenset(("N", "N")): 1.45,
    frozenset(("N", "O")): 1.40,
    frozenset(("O", "O")): 1.48,
    frozenset(("C", "F")): 1.35,
    frozenset(("C", "Cl")): 1.77,
    frozenset(("C", "Br")): 1.94,
    frozenset(("C", "I")): 2.14,
}

_VALENCE = {"C": 4, "N": 3, "O": 2, "F": 1, "Cl": 1, "Br": 1, "I": 1}


def default_substituent_pool() -> tuple[tuple[str, ...], ...]:
    """Halogen caps plus every linear chain over C/N/O of length 1-3."""
    pool: list[tuple[str, ...]] = [("F",), ("Cl",), ("Br",), ("I",)]
    for length in (1, 2, 3):
        pool.extend(product(("C", "N", "O"), repeat=length))
    return tuple(pool)


@dataclass
class GenSpec:
    n_graphs: int = 100
    conformers_per_stereoisomer: int = 2
    substituent_pool: tuple[tuple[str, ...], ...] = field(
        default_factory=default_substituent_pool
    )
    bond_lengths: dict = field(default_factory=lambda: dict(DEFAULT_BOND_LENGTHS))
    jitter_sigma: float = 0.01
    score_margin_range: tuple[float, float] = (0.3, 2.0)
    score_base_range: tuple[float, float] = (-8.0, -4.0)
    seed: int = 0

    def __post_init__(self):
        if self.conformers_per_stereoisomer < 1:
            raise ValueError("need at least one conformer per stereoisomer")
        if len(self.substituent_pool) < 4:
            raise ValueError("substituent pool needs >= 4 templates")
        lo, hi = self.score_margin_range
        if not (0 < lo <= hi):
            raise ValueError("score_margin_range must be a positive interval")

    def bond_length(self, a: str, b: str) -> float:
        try:
            return self.bond_lengths[frozenset((a, b))]
        except KeyError:
            raise ValueError(f"no tabulated bond length for {a}-{b}") from None


class GenerationError(RuntimeError):
    pass


def _place_by_internals(a, b, c, length, angle, torsion):
    """Position d with |d-c| = length, angle(b,c,d) = angle and
    dihedral(a,b,c,d) = torsion (same sign convention as geom.dihedral)."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    ab = b - a
    n = np.cross(ab, bc)
    nn = np.linalg.norm(n)
    if nn < 1e-10:
        raise GenerationError("collinear reference triple")
    n /= nn
    m = np.cross(n, bc)
    d_local = np.array(
        [
            -length * np.cos(angle),
            length * np.sin(angle) * np.cos(torsion),
            length * np.sin(angle) * np.sin(torsion),
        ]
    )
    return c + d_local[0] * bc + d_local[1] * m + d_local[2] * n


def _build_molecule(templates, spec: GenSpec, rng: np.random.Generator) -> Conformer:
    """Tree molecule: center C at the origin, branch roots on ideal
    tetrahedral directions, deeper atoms chained with ideal angles and
    random torsions."""
    elements = ["C"]
    positions = [np.zeros(3)]
    bonds: list[tuple[int, int]] = []
    parents = [-1]
    branch_roots: list[int] = []

    for branch, template in enumerate(templates):
        prev = 0
        for depth, element in enumerate(template):
            idx = len(elements)
            elements.append(element)
            if depth == 0:
                length = spec.bond_length("C", element)
                positions.append(TETRA_DIRS[branch] * length)
                branch_roots.append(idx)
            else:
                length = spec.bond_length(elements[prev], element)
                grand = parents[prev]
                if grand == 0:
                    # torsion reference: another tetrahedral direction at the
                    # center (its branch atoms may not be placed yet)
                    ref = TETRA_DIRS[(branch + 1) % 4]
                else:
                    ref = positions[parents[grand]]
                positions.append(
                    _place_by_internals(
                        ref, positions[grand], positions[prev],
                        length, TETRA_ANGLE, rng.uniform(0.0, 2.0 * np.pi),
                    )
                )
            bonds.append((prev, idx))
            parents.append(prev)
            prev = idx

    degrees = [0] * len(elements)
    for i, j in bonds:
        degrees[i] += 1
        degrees[j] += 1
    atoms = []
    for el, pos, deg in zip(elements, positions, degrees):
        h_count = max(0, _VALENCE[el] - deg)
        atoms.append(
            Atom(
                element=el,
                atomic_number=PERIODIC_TABLE[el][0],
                formal_charge=0,
                position=np.asarray(pos, dtype=np.float64),
                implicit_hydrogens=h_count,
                hybridization="sp3",
            )
        )
    return Conformer(
        atoms,
        [Bond(i, j, "single") for i, j in bonds],
        graph_id="",
        stereoisomer_id="",
    )


def generate_pair(spec: GenSpec, rng: np.random.Generator,
                  templates=None) -> tuple[Conformer, Conformer]:
    """One enantiomer pair (R-form, S-form), labels assigned by the
    geometric oracle. Redraws internally on priority ties (bounded)."""
    pool = spec.substituent_pool
    for _ in range(100):
        if templates is None:
            chosen = [pool[k] for k in rng.choice(len(pool), size=4, replace=False)]
        else:
            chosen = list(templates)
        mol = _build_molecule(chosen, spec, rng)
        try:
            label = geom.assign_rs_label(mol, 0)
        except geom.GeometryError:
            if templates is not None:
                raise
            continue
        mirror = geom.transform_conformer(mol, geom.Reflection(np.array([0.0, 0.0, 1.0])))
        mol.labels = Labels(rs=label)
        mirror.labels = Labels(rs="S" if label == "R" else "R")
        r_form, s_form = (mol, mirror) if label == "R" else (mirror, mol)
        return r_form, s_form
    raise GenerationError("could not draw four substituents with distinct priorities")


def rotatable_bonds(conformer: Conformer) -> list[tuple[int, int]]:
    """Internal non-ring bonds (both endpoints of heavy degree >= 2)."""
    deg = conformer.degrees()
    return [
        (b.i, b.j)
        for b in conformer.bonds
        if not b.in_ring and deg[b.i] >= 2 and deg[b.j] >= 2
    ]


def expand_conformers(stereoisomer: Conformer, k: int, spec: GenSpec,
                      rng: np.random.Generator) -> list[Conformer]:
    """k conformers: independent rotations of every rotatable bond plus
    Gaussian jitter; the R/S label is re-verified after jittering and the
    draw is rejected if noise flipped a near-degenerate geometry."""
    if k < 1:
        raise ValueError("k must be >= 1")
    bonds = rotatable_bonds(stereoisomer)
    label = stereoisomer.labels.rs
    out = []
    for _ in range(k):
        for _attempt in range(100):
            conf = stereoisomer
            for (x, y) in bonds:
                angle = rng.uniform(0.0, 2.0 * np.pi)
                conf = geom.transform_conformer(conf, geom.BondRotation(x, y, angle))
            coords = conf.coords()
            if spec.jitter_sigma > 0:
                coords = coords + rng.normal(0.0, spec.jitter_sigma, coords.shape)
            conf = conf.with_coords(coords)
            if label is not None:
                try:
                    if geom.assign_rs_label(conf, 0) != label:
                        continue
                except geom.GeometryError:
                    continue
            out.append(conf)
            break
        else:
            raise GenerationError("jitter rejection loop exceeded 100 draws")
    return out


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(list(d["train"]), list(d["val"]), list(d["test"]))

    def partition_of(self) -> dict[str, str]:
        out = {}
        for part in ("train", "val", "test"):
            for gid in getattr(self, part):
                out[gid] = part
        return out


TASKS = ("contrastive", "rs", "classify2", "rank_regress")


def build_dataset(spec: GenSpec, task: str) -> tuple[list[Conformer], SplitManifest]:
    """Generate `n_graphs` distinct enantiomer pairs with task labels and a
    70/15/15 graph-level split manifest.

    Per-graph randomness comes from independent child streams of the spec
    seed, so regeneration with the same spec is bit-identical.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    root = np.random.SeedSequence(spec.seed)
    pool = spec.substituent_pool
    combo_rng = np.random.default_rng(root.spawn(1)[0])
    n_combos = _n_choose_4(len(pool))
    if spec.n_graphs > n_combos:
        raise ValueError(
            f"n_graphs={spec.n_graphs} exceeds the {n_combos} distinct "
            f"4-template combinations in the pool"
        )
    combos: set[tuple] = set()
    order: list[tuple] = []
    while len(order) < spec.n_graphs:
        pick = tuple(sorted(
            tuple(pool[k]) for k in combo_rng.choice(len(pool), size=4, replace=False)
        ))
        if pick not in combos:
            combos.add(pick)
            order.append(pick)

    records: list[Conformer] = []
    graph_ids: list[str] = []
    for g_index, templates in enumerate(order):
        child = np.random.default_rng(root.spawn(1)[0])
        gid = f"g{g_index:05d}"
        graph_ids.append(gid)
        r_form, s_form = generate_pair(spec, child, templates=templates)
        base = child.uniform(*spec.score_base_range)
        gap = child.uniform(*spec.score_margin_range)
        for form, sid_suffix in ((r_form, "R"), (s_form, "S")):
            form.graph_id = gid
            form.stereoisomer_id = f"{gid}-{sid_suffix}"
            labels = Labels(rs=form.labels.rs)
            if task == "classify2":
                labels.class_label = 1 if form.labels.rs == "R" else 0
            if task == "rank_regress":
                sign = 1.0 if form.labels.rs == "R" else -1.0
                labels.score = base + sign * gap / 2.0
            form.labels = labels
            for conf in expand_conformers(form, spec.conformers_per_stereoisomer, spec, child):
                records.append(conf)

    split_rng = np.random.default_rng(root.spawn(1)[0])
    shuffled = list(graph_ids)
    split_rng.shuffle(shuffled)
    n = len(shuffled)
    n_train = int(round(0.70 * n))
    n_val = int(round(0.15 * n))
    manifest = SplitManifest(
        train=sorted(shuffled[:n_train]),
        val=sorted(shuffled[n_train : n_train + n_val]),
        test=sorted(shuffled[n_train + n_val :]),
    )
    return records, manifest


def _n_choose_4(n: int) -> int:
    return n * (n - 1) * (n - 2) * (n - 3) // 24


# ---------------------------------------------------------------------------
# superimposability diagnostics (test oracle)


def kabsch_rmsd(a: np.ndarray, b: np.ndarray) -> float:
    """RMSD after the optimal proper rotation + translation (no mirror)."""
    pa = a - a.mean(axis=0)
    pb = b - b.mean(axis=0)
    u, s, vt = np.linalg.svd(pa.T @ pb)
    sign = np.sign(np.linalg.det(u @ vt))
    d = np.diag([1.0, 1.0, sign])
    rot = u @ d @ vt
    diff = pa @ rot - pb
    return float(np.sqrt((diff * diff).sum() / len(a)))


def min_rmsd_over_rotations(target: Conformer, candidate: Conformer,
                            steps: int = 16) -> float:
    """Brute-force grid over all rotatable-bond angles of `candidate`,
    reporting the best rigid-aligned RMSD to `target`. Exponential in the
    bond count; intended for small test molecules."""
    bonds = rotatable_bonds(candidate)
    angles = np.arange(steps) * (2.0 * np.pi / steps)
    best = np.inf
    ta = target.coords()

    def recurse(conf, remaining):
        nonlocal best
        if not remaining:
            best = min(best, kabsch_rmsd(ta, conf.coords()))
            return
        (x, y), rest = remaining[0], remaining[1:]
        for angle in angles:
            recurse(geom.transform_conformer(conf, geom.BondRotation(x, y, angle)), rest)

    recurse(candidate, bonds)
    return best

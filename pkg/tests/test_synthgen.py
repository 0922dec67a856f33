"""The synthetic enantiomer-pair generator."""

import numpy as np
import pytest

from chiralnet import geom, molio, synthgen
from chiralnet.synthgen import (
    GenSpec,
    build_dataset,
    default_substituent_pool,
    expand_conformers,
    generate_pair,
    kabsch_rmsd,
    min_rmsd_over_rotations,
    rotatable_bonds,
)


def test_pool_templates_are_distinct():
    pool = default_substituent_pool()
    assert len(pool) == len(set(pool)) == 4 + 3 + 9 + 27


def test_generate_pair_labels_come_from_oracle():
    spec = GenSpec(seed=0)
    rng = np.random.default_rng(0)
    for _ in range(5):
        r_form, s_form = generate_pair(spec, rng)
        assert geom.assign_rs_label(r_form, 0) == "R" == r_form.labels.rs
        assert geom.assign_rs_label(s_form, 0) == "S" == s_form.labels.rs


def test_pair_internal_coords_mirror_exactly():
    spec = GenSpec(seed=1)
    rng = np.random.default_rng(1)
    r_form, s_form = generate_pair(spec, rng)
    a = geom.enumerate_internal_coords(r_form)
    b = geom.enumerate_internal_coords(s_form)
    assert np.abs(a.bond_lengths - b.bond_lengths).max() < 1e-9
    assert np.abs(a.angle_values - b.angle_values).max() < 1e-9
    for ga, gb in zip(a.torsion_groups, b.torsion_groups):
        assert ga.bond == gb.bond
        assert np.abs(ga.angles + gb.angles).max() < 1e-9


def test_generated_molecules_are_trees():
    spec = GenSpec(seed=2)
    rng = np.random.default_rng(2)
    r_form, _ = generate_pair(spec, rng)
    assert len(r_form.bonds) == r_form.n_atoms - 1
    assert all(not b.in_ring for b in r_form.bonds)
    # every internal bond is rotatable
    deg = r_form.degrees()
    internal = [(b.i, b.j) for b in r_form.bonds if deg[b.i] >= 2 and deg[b.j] >= 2]
    assert internal == rotatable_bonds(r_form)


def test_ideal_tetrahedral_angles_at_center():
    spec = GenSpec(seed=3)
    rng = np.random.default_rng(3)
    r_form, _ = generate_pair(spec, rng)
    coords = r_form.coords()
    nbrs = r_form.neighbors()[0]
    tetra = np.arccos(-1.0 / 3.0)
    for a in range(4):
        for b in range(a + 1, 4):
            angle = geom.bond_angle(coords, nbrs[a], 0, nbrs[b])
            assert angle == pytest.approx(tetra, abs=1e-9)


def test_expand_identity_without_noise_or_rotation(monkeypatch):
    spec = GenSpec(seed=4, jitter_sigma=0.0)
    rng = np.random.default_rng(4)
    r_form, _ = generate_pair(spec, rng)

    class ZeroRng:
        def uniform(self, lo, hi):
            return 0.0
        def normal(self, *a, **k):
            raise AssertionError("no jitter expected")

    out = expand_conformers(r_form, 1, spec, ZeroRng())
    assert np.abs(out[0].coords() - r_form.coords()).max() < 1e-12


def test_expand_preserves_label_and_bond_lengths():
    spec = GenSpec(seed=5, jitter_sigma=0.01)
    rng = np.random.default_rng(5)
    r_form, _ = generate_pair(spec, rng)
    base = geom.enumerate_internal_coords(r_form).bond_lengths
    conformers = expand_conformers(r_form, 4, spec, rng)
    for conf in conformers:
        assert geom.assign_rs_label(conf, 0) == r_form.labels.rs
        lengths = geom.enumerate_internal_coords(conf).bond_lengths
        assert np.abs(lengths - base).max() < 3 * 0.01 * 4  # jitter bound
        assert conf.stereoisomer_id == r_form.stereoisomer_id


def test_expanded_conformers_differ_in_torsions():
    spec = GenSpec(seed=6)
    rng = np.random.default_rng(6)
    r_form, _ = generate_pair(spec, rng)
    if not rotatable_bonds(r_form):
        pytest.skip("drew a molecule with no rotatable bonds")
    a, b = expand_conformers(r_form, 2, spec, rng)
    ica = geom.enumerate_internal_coords(a)
    icb = geom.enumerate_internal_coords(b)
    deltas = [
        np.abs(np.array([geom.wrap_angle(x - y) for x, y in zip(ga.angles, gb.angles)])).max()
        for ga, gb in zip(ica.torsion_groups, icb.torsion_groups)
    ]
    assert max(deltas) > 0.1


def test_build_dataset_determinism():
    spec = GenSpec(n_graphs=4, conformers_per_stereoisomer=2, seed=7)
    a_records, a_manifest = build_dataset(spec, "rank_regress")
    b_records, b_manifest = build_dataset(spec, "rank_regress")
    assert a_manifest.to_dict() == b_manifest.to_dict()
    assert molio.write_dataset_json(a_records) == molio.write_dataset_json(b_records)


def test_build_dataset_class_balance_and_split_rule():
    spec = GenSpec(n_graphs=10, conformers_per_stereoisomer=2, seed=8)
    records, manifest = build_dataset(spec, "classify2")
    labels = [r.labels.class_label for r in records]
    assert labels.count(1) == labels.count(0) == len(records) // 2
    partition = manifest.partition_of()
    assert len(partition) == 10
    for record in records:
        assert record.graph_id in partition


def test_build_dataset_score_gaps_within_margin_range():
    spec = GenSpec(n_graphs=8, conformers_per_stereoisomer=2, seed=9,
                   score_margin_range=(0.3, 2.0))
    records, _ = build_dataset(spec, "rank_regress")
    by_sid = {}
    for r in records:
        by_sid[r.stereoisomer_id] = r.labels.score
    by_graph = {}
    for r in records:
        by_graph.setdefault(r.graph_id, set()).add(r.stereoisomer_id)
    for gid, sids in by_graph.items():
        a, b = sorted(sids)
        gap = abs(by_sid[a] - by_sid[b])
        assert 0.3 - 1e-12 <= gap <= 2.0 + 1e-12
        # higher score goes to the R form
        r_sid = next(s for s in sids if s.endswith("-R"))
        s_sid = next(s for s in sids if s.endswith("-S"))
        assert by_sid[r_sid] > by_sid[s_sid]


def test_build_dataset_round_trips_through_json():
    spec = GenSpec(n_graphs=3, conformers_per_stereoisomer=2, seed=10)
    records, _ = build_dataset(spec, "rank_regress")
    back = molio.parse_dataset_json(molio.write_dataset_json(records))
    assert len(back) == len(records)
    for a, b in zip(records, back):
        assert molio.conformers_identical(a, b)


def test_too_many_graphs_for_pool_rejected():
    pool = (("F",), ("Cl",), ("Br",), ("I",), ("C",))
    with pytest.raises(ValueError, match="exceeds"):
        build_dataset(GenSpec(n_graphs=10, substituent_pool=pool, seed=0), "rs")


def test_kabsch_aligns_rotated_copy():
    rng = np.random.default_rng(11)
    points = rng.normal(size=(8, 3))
    rigid = geom.random_rigid(rng)
    moved = points @ rigid.rotation.T + rigid.translation
    assert kabsch_rmsd(points, moved) < 1e-9


@pytest.mark.slow
def test_enantiomers_not_superimposable_by_bond_rotations():
    """Grid search over bond rotations plus optimal rigid alignment cannot
    map one mirror form onto the other."""
    pool = (("F",), ("Cl",), ("Br",), ("C", "C"))  # one rotatable bond
    spec = GenSpec(seed=12, substituent_pool=pool)
    rng = np.random.default_rng(12)
    r_form, s_form = generate_pair(spec, rng, templates=pool)
    assert len(rotatable_bonds(r_form)) <= 2
    assert min_rmsd_over_rotations(r_form, s_form, steps=16) > 0.3
    # sanity: the conformer IS superimposable on a bond-rotated copy of itself
    rotated = geom.transform_conformer(
        r_form, geom.BondRotation(*rotatable_bonds(r_form)[0], 1.1)
    )
    assert min_rmsd_over_rotations(r_form, rotated, steps=64) < 0.05

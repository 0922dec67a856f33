"""Model architecture: component formulas, invariances, checkpointing."""

import numpy as np
import pytest

from chiralnet import autodiff as ad
from chiralnet import geom, synthgen
from chiralnet.model import Model, ModelConfig, prepare
from chiralnet.molio import PERIODIC_TABLE, Atom, Bond, Conformer, FeatureConfig


def tiny_config(**overrides):
    base = dict(
        h_dims=(8, 12, 8), gat_layers=2, gat_heads=2,
        f_e=(8, 1), f_d=(8, 1), f_angle=(8, 1), f_alpha=(8, 1), f_c=(8, 1),
        f_phase=(12, 1), f_out=(8, 1), f_cmp=(8, 1), z_dim=4,
        task_head="classify2",
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def molecules():
    spec = synthgen.GenSpec(n_graphs=3, conformers_per_stereoisomer=2, seed=21)
    records, _ = synthgen.build_dataset(spec, "rs")
    return records


@pytest.fixture(scope="module")
def tiny_model():
    return Model.initialize(tiny_config(), FeatureConfig(), seed=5)


def atom(element, position, h=0):
    return Atom(element, PERIODIC_TABLE[element][0], 0,
                np.asarray(position, dtype=np.float64), h, "sp3")


# ---------------------------------------------------------------------------
# config validation


def test_config_rejects_bad_head_split():
    with pytest.raises(ValueError, match="divide"):
        tiny_config(h_dims=(8, 9, 8), gat_heads=2)


def test_config_rejects_mismatched_layer_count():
    with pytest.raises(ValueError, match="h_dims"):
        tiny_config(h_dims=(8, 8), gat_layers=2)


def test_model_rejects_feature_width_mismatch():
    cfg = tiny_config(node_dim=10)
    with pytest.raises(ValueError, match="node_dim"):
        Model(cfg, FeatureConfig(), ad.ParameterStore())


# ---------------------------------------------------------------------------
# edge-conditioned embedding (hand-checkable toy)


def test_econv_toy_value():
    """One-dimensional toy: theta = [2], x_i = [1], one neighbor x_j = [3],
    edge filter output 0.5 and identity projection give h_i = 2 + 1.5."""
    x = ad.constant(np.array([[1.0], [3.0]]))
    theta = ad.constant(np.array([[2.0]]))
    proj = ad.constant(np.array([[1.0]]))
    filt = ad.constant(np.array([[0.5], [0.5]]))  # one row per directed edge
    nbr = np.array([1, 0])
    center = np.array([0, 1])
    msgs = ad.mul(ad.gather_rows(x, nbr), filt)
    agg = ad.scatter_add_rows(msgs, center, 2)
    h = ad.add(ad.matmul(x, theta), ad.matmul(agg, proj))
    out = ad.evaluate(h, ad.ParameterStore())
    assert out[0, 0] == pytest.approx(2.0 + 1.5, abs=1e-12)
    assert out[1, 0] == pytest.approx(6.0 + 0.5, abs=1e-12)


def test_isolated_node_gets_self_term_only(tiny_model):
    conf = Conformer([atom("C", [0, 0, 0], 4)], [], "g", "s")
    prep = prepare(conf, tiny_model.feature_config)
    roots = tiny_model.build(prep)
    ad.evaluate_many([roots.node_states, roots.torsion_latent], tiny_model.store)
    # no bonds: torsion latent must be exactly zero
    assert np.array_equal(roots.torsion_latent.value, np.zeros((1, 4)))


# ---------------------------------------------------------------------------
# attention stack structure


def test_attention_rows_sum_to_one(tiny_model, molecules):
    prep = prepare(molecules[0], tiny_model.feature_config)
    roots = tiny_model.build(prep)
    softmax_nodes = []

    def collect(node, seen):
        if id(node) in seen:
            return
        seen.add(id(node))
        if node.op == "softmax":
            softmax_nodes.append(node)
        for parent in node.inputs:
            collect(parent, seen)

    collect(roots.prediction, set())
    ad.evaluate_many([roots.prediction], tiny_model.store)
    assert softmax_nodes
    for node in softmax_nodes:
        np.testing.assert_allclose(
            node.value.sum(axis=1), np.ones(node.value.shape[0]), atol=1e-12
        )


def test_single_atom_attention_weight_is_one(tiny_model):
    conf = Conformer([atom("C", [0, 0, 0], 4)], [], "g", "s")
    out = tiny_model.forward(conf)
    assert out.node_states.shape[0] == 1
    assert np.all(np.isfinite(out.prediction))


def test_two_identical_neighbors_equal_attention(tiny_model):
    # center with two identical substituents: their attention weights match
    conf = Conformer(
        [atom("C", [0, 0, 0], 2), atom("F", [1.4, 0, 0]), atom("F", [-1.4, 0, 0])],
        [Bond(0, 1, "single"), Bond(0, 2, "single")], "g", "s",
    )
    prep = prepare(conf, tiny_model.feature_config)
    roots = tiny_model.build(prep)
    stack = [roots.node_states]
    seen = set()
    softmaxes = []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "softmax":
            softmaxes.append(node)
        stack.extend(node.inputs)
    ad.evaluate_many([roots.node_states], tiny_model.store)
    for node in softmaxes:
        attn = node.value
        assert attn[0, 1] == pytest.approx(attn[0, 2], abs=1e-12)


# ---------------------------------------------------------------------------
# torsion phasor block


def test_coefficients_in_unit_interval_and_phases_normalized(tiny_model, molecules):
    prep = prepare(molecules[0], tiny_model.feature_config)
    roots = tiny_model.build(prep)
    ad.evaluate_many([roots.coeffs, roots.phase_cos, roots.phase_sin], tiny_model.store)
    c = roots.coeffs.value
    assert np.all(c > 0) and np.all(c < 1)
    unit = roots.phase_cos.value**2 + roots.phase_sin.value**2
    np.testing.assert_allclose(unit, np.ones_like(unit), atol=1e-9)


def test_radius_bounded_by_coefficient_sum(tiny_model, molecules):
    for conf in molecules[:4]:
        prep = prepare(conf, tiny_model.feature_config)
        roots = tiny_model.build(prep)
        ad.evaluate_many([roots.coeffs, roots.radii], tiny_model.store)
        sums = np.zeros(prep.n_groups)
        np.add.at(sums, prep.tor_group, roots.coeffs.value.ravel())
        assert np.all(roots.radii.value.ravel() <= sums + 1e-12)


def test_single_torsion_radius_equals_coefficient():
    """A bond with one coupled torsion has radius == its weight for any
    torsion value and any phase."""
    c = 0.7
    for psi in (0.3, -2.0, 3.0):
        for phi in (0.0, 1.1, -2.5):
            radius = np.hypot(c * np.cos(psi + phi), c * np.sin(psi + phi))
            assert radius == pytest.approx(c, abs=1e-12)


def test_three_phasor_cancellation():
    psi = np.deg2rad([0.0, 120.0, 240.0])
    radius = np.hypot(np.cos(psi).sum(), np.sin(psi).sum())
    assert radius == pytest.approx(0.0, abs=1e-12)


def test_phasor_sum_with_phases_frozen_values():
    """Shifted three-phasor sums; expected values from the complex-number
    oracle sum(c * exp(i(psi + phi)))."""
    psi = np.deg2rad([0.0, 120.0, 240.0])
    phi = np.deg2rad([10.0, 20.0, 30.0])

    def oracle(psis):
        return abs(np.exp(1j * (psis + phi)).sum())

    direct = np.hypot(np.cos(psi + phi).sum(), np.sin(psi + phi).sum())
    mirrored = np.hypot(np.cos(-psi + phi).sum(), np.sin(-psi + phi).sum())
    assert direct == pytest.approx(oracle(psi), abs=1e-12)
    assert mirrored == pytest.approx(oracle(-psi), abs=1e-12)
    assert direct == pytest.approx(0.28558, abs=5e-6)
    assert mirrored == pytest.approx(0.31596, abs=5e-6)
    assert abs(direct - mirrored) > 0.02  # phases separate the mirror forms


def test_zero_phases_restore_mirror_symmetry():
    psi = np.deg2rad([17.0, 141.0, 250.0])
    c = np.array([0.2, 0.9, 0.55])
    direct = np.hypot((c * np.cos(psi)).sum(), (c * np.sin(psi)).sum())
    mirrored = np.hypot((c * np.cos(-psi)).sum(), (c * np.sin(-psi)).sum())
    assert direct == pytest.approx(mirrored, abs=1e-12)


def test_orientation_swap_leaves_coefficients_unchanged(tiny_model, molecules):
    """The symmetrized MLPs make (i, x, y, j) and (j, y, x, i) equivalent,
    so torsion weights do not depend on the stored bond orientation."""
    conf = molecules[0]
    prep = prepare(conf, tiny_model.feature_config)
    roots = tiny_model.build(prep)
    ad.evaluate_many([roots.coeffs], tiny_model.store)
    base = roots.coeffs.value.copy()

    swapped = prepare(conf, tiny_model.feature_config)
    g = 0
    swapped.tor_i, swapped.tor_j = swapped.tor_j.copy(), swapped.tor_i.copy()
    swapped.tor_x, swapped.tor_y = swapped.tor_y.copy(), swapped.tor_x.copy()
    del g
    roots2 = tiny_model.build(swapped)
    ad.evaluate_many([roots2.coeffs], tiny_model.store)
    np.testing.assert_allclose(roots2.coeffs.value, base, atol=1e-12)


# ---------------------------------------------------------------------------
# latents and invariances


def test_diatomic_zero_latents(tiny_model):
    conf = Conformer(
        [atom("C", [0, 0, 0], 3), atom("C", [1.54, 0, 0], 3)],
        [Bond(0, 1, "single")], "g", "s",
    )
    out = tiny_model.forward(conf)
    assert np.array_equal(out.torsion_latent, np.zeros(4))
    assert np.array_equal(out.angle_latent, np.zeros(4))
    assert out.radii.size == 0


def test_rigid_invariance(tiny_model, molecules):
    rng = np.random.default_rng(0)
    conf = molecules[0]
    base = tiny_model.forward(conf)
    for _ in range(3):
        moved = geom.transform_conformer(conf, geom.random_rigid(rng))
        out = tiny_model.forward(moved)
        np.testing.assert_allclose(out.prediction, base.prediction, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(out.torsion_latent, base.torsion_latent,
                                   rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(out.radii, base.radii, rtol=1e-6, atol=1e-9)


def test_bond_rotation_invariance(tiny_model, molecules):
    conf = molecules[0]
    base = tiny_model.forward(conf)
    for (x, y) in synthgen.rotatable_bonds(conf)[:3]:
        for angle in (0.1, 1.0, 2.5, 5.0):
            rotated = geom.transform_conformer(conf, geom.BondRotation(x, y, angle))
            out = tiny_model.forward(rotated)
            np.testing.assert_allclose(out.torsion_latent, base.torsion_latent,
                                       rtol=1e-6, atol=1e-12)
            np.testing.assert_allclose(out.radii, base.radii, rtol=1e-6, atol=1e-12)


def test_reflection_changes_output_with_phases(tiny_model, molecules):
    conf = molecules[0]
    mirror = geom.transform_conformer(conf, geom.Reflection(np.array([0.0, 0, 1])))
    a = tiny_model.forward(conf)
    b = tiny_model.forward(mirror)
    assert np.abs(a.torsion_latent - b.torsion_latent).max() > 1e-6
    assert np.abs(a.prediction - b.prediction).max() > 1e-8


def test_reflection_preserves_radii_without_phases(tiny_model, molecules):
    conf = molecules[0]
    mirror = geom.transform_conformer(conf, geom.Reflection(np.array([0.0, 0, 1])))
    a = tiny_model.forward(conf, zero_phases=True)
    b = tiny_model.forward(mirror, zero_phases=True)
    np.testing.assert_allclose(a.radii, b.radii, atol=1e-9)


def test_permutation_invariance(tiny_model, molecules):
    conf = molecules[0]
    base = tiny_model.forward(conf)
    rng = np.random.default_rng(4)
    perm = rng.permutation(conf.n_atoms)
    inverse = np.argsort(perm)
    atoms = [conf.atoms[inverse[k]] for k in range(conf.n_atoms)]
    bonds = [Bond(int(perm[b.i]), int(perm[b.j]), b.order, b.conjugated) for b in conf.bonds]
    shuffled = Conformer(
        [Atom(a.element, a.atomic_number, a.formal_charge, a.position.copy(),
              a.implicit_hydrogens, a.hybridization) for a in atoms],
        bonds, conf.graph_id, conf.stereoisomer_id,
    )
    out = tiny_model.forward(shuffled)
    np.testing.assert_allclose(out.torsion_latent, base.torsion_latent, atol=1e-9)
    np.testing.assert_allclose(out.distance_latent, base.distance_latent, atol=1e-9)
    np.testing.assert_allclose(out.angle_latent, base.angle_latent, atol=1e-9)
    np.testing.assert_allclose(out.prediction, base.prediction, atol=1e-9)


def test_masked_model_identical_on_enantiomers(molecules):
    model = Model.initialize(
        tiny_config(mask_internal_coords=True), FeatureConfig(), seed=5
    )
    conf = molecules[0]
    mirror = geom.transform_conformer(conf, geom.Reflection(np.array([0.0, 0, 1])))
    a = model.forward(conf)
    b = model.forward(mirror)
    assert np.array_equal(a.prediction, b.prediction)
    assert np.array_equal(a.torsion_latent, b.torsion_latent)
    assert a.phase_norms is None


def test_econv_permutation_equivariance(tiny_model, molecules):
    conf = molecules[0]
    prep = prepare(conf, tiny_model.feature_config)
    roots = tiny_model.build(prep)
    ad.evaluate_many([roots.node_states], tiny_model.store)
    base_states = roots.node_states.value.copy()
    perm = np.random.default_rng(8).permutation(conf.n_atoms)
    inverse = np.argsort(perm)
    atoms = [conf.atoms[inverse[k]] for k in range(conf.n_atoms)]
    bonds = [Bond(int(perm[b.i]), int(perm[b.j]), b.order, b.conjugated) for b in conf.bonds]
    shuffled = Conformer(
        [Atom(a.element, a.atomic_number, a.formal_charge, a.position.copy(),
              a.implicit_hydrogens, a.hybridization) for a in atoms],
        bonds, conf.graph_id, conf.stereoisomer_id,
    )
    prep2 = prepare(shuffled, tiny_model.feature_config)
    roots2 = tiny_model.build(prep2)
    ad.evaluate_many([roots2.node_states], tiny_model.store)
    # old atom k now sits at row perm[k]
    np.testing.assert_allclose(roots2.node_states.value[perm], base_states, atol=1e-9)


# ---------------------------------------------------------------------------
# chiral message passing stage


def test_cmp_preserves_invariances(molecules):
    model = Model.initialize(
        tiny_config(use_cmp=True, cmp_layers=2, cmp_heads=2), FeatureConfig(), seed=6
    )
    conf = molecules[0]
    base = model.forward(conf)
    rotated = geom.transform_conformer(
        conf, geom.BondRotation(*synthgen.rotatable_bonds(conf)[0], 1.7)
    )
    out = model.forward(rotated)
    np.testing.assert_allclose(out.node_states, base.node_states, rtol=1e-6, atol=1e-9)
    rigid = geom.transform_conformer(conf, geom.random_rigid(np.random.default_rng(1)))
    out = model.forward(rigid)
    np.testing.assert_allclose(out.prediction, base.prediction, rtol=1e-6, atol=1e-9)


def test_cmp_reduces_to_reference_with_zero_edge_attributes():
    """A star molecule has no internal bonds, so every CMP edge attribute is
    the filter MLP's response to zero. The model's CMP stage must then match
    a hand-built numpy reference: one edge-conditioned layer with that
    constant filter followed by one attention layer."""
    cfg = tiny_config(use_cmp=True, cmp_layers=1, cmp_heads=2)
    model = Model.initialize(cfg, FeatureConfig(), seed=7)
    star = Conformer(
        [atom("C", [0, 0, 0], 1), atom("F", [1.35, 0, 0]),
         atom("Cl", [-0.9, 1.5, 0]), atom("Br", [-0.9, -1.6, 0.2])],
        [Bond(0, 1, "single"), Bond(0, 2, "single"), Bond(0, 3, "single")],
        "g", "s",
    )
    prep = prepare(star, model.feature_config)
    assert prep.n_groups == 0
    roots = model.build(prep)
    ad.evaluate_many([roots.node_states], model.store)

    # plain stack output (h before CMP), via a no-CMP twin on the same store
    plain = Model(ModelConfig.from_dict({**cfg.to_dict(), "use_cmp": False}),
                  model.feature_config, model.store).build(prep)
    ad.evaluate_many([plain.node_states], model.store)
    h_t = plain.node_states.value
    store = model.store

    filt0 = ad.evaluate(
        model._mlp(ad.constant(np.zeros((1, cfg.z_dim))), "cmp.f", cfg.f_cmp), store
    ).ravel()
    n = star.n_atoms
    agg = np.zeros_like(h_t)
    np.add.at(agg, prep.center_of_edge, h_t[prep.nbr_of_edge] * filt0)
    hc = h_t @ store["cmp.theta"] + agg @ store["cmp.proj"]

    def slope(x, s):
        return np.where(x > 0, x, s * x)

    heads = []
    for k in range(cfg.cmp_heads):
        wh = hc @ store[f"cmpgat1.h{k}.w"]
        s = wh @ store[f"cmpgat1.h{k}.a_src"]
        d = wh @ store[f"cmpgat1.h{k}.a_dst"]
        logits = np.full((n, n), -np.inf)
        logits[prep.att_src, prep.att_dst] = slope(
            (s[prep.att_src] + d[prep.att_dst]).ravel(), cfg.attention_slope
        )
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        e[~prep.att_mask] = 0.0
        attn = e / e.sum(axis=1, keepdims=True)
        heads.append(attn @ wh)
    reference = slope(sum(heads) / cfg.cmp_heads, cfg.leaky_slope)
    np.testing.assert_allclose(roots.node_states.value, reference, atol=1e-10)


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_round_trip(tmp_path, tiny_model, molecules):
    path = tmp_path / "ckpt.json"
    tiny_model.save(path)
    loaded = Model.load(path)
    conf = molecules[0]
    a = tiny_model.forward(conf)
    b = loaded.forward(conf)
    assert np.array_equal(a.prediction, b.prediction)
    assert loaded.config.to_dict() == tiny_model.config.to_dict()


def test_checkpoint_shape_validation(tmp_path, tiny_model):
    import json

    path = tmp_path / "ckpt.json"
    tiny_model.save(path)
    payload = json.loads(path.read_text())
    payload["params"]["slots"]["out.w0"]["shape"][0] += 1
    payload["params"]["slots"]["out.w0"]["data"].extend(
        [0.0] * (len(payload["params"]["slots"]["out.w0"]["data"]) //
                 (payload["params"]["slots"]["out.w0"]["shape"][0] - 1))
    )
    path.write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="shape"):
        Model.load(path)


def test_frozen_flags_propagate():
    model = Model.initialize(
        tiny_config(freeze_fc=True, freeze_fphase=True), FeatureConfig(), seed=1
    )
    frozen = [n for n in model.store.names() if not model.store.is_trainable(n)]
    assert any(n.startswith("coeff.") for n in frozen)
    assert any(n.startswith("phase.") for n in frozen)
    assert all(n.startswith(("coeff.", "phase.")) for n in frozen)

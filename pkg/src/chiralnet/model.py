"""The conformer encoder network.

Pipeline: edge-conditioned embedding of node features, a stack of
multi-head graph-attention layers, three internal-coordinate encoders
(bond distances, bond angles, and per-internal-bond torsion phasor sums
with learned weights and learned phase shifts), then a readout MLP over
the concatenated latents. The torsion branch is what makes the model
sensitive to mirror reflection while staying invariant to rotations about
internal bonds: for each internal bond the weighted phasor sum
sum_k c_k * exp(i (psi_k + phi_k)) has a rotation-invariant magnitude,
and the learned phases phi_k break the mirror symmetry of that magnitude.

Everything is built as autodiff Expressions so one code path serves
inference, training, and the invariance checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Expression, ParameterStore
from .geom import InternalCoordinates, enumerate_internal_coords
from .molio import Conformer, FeatureConfig, featurize

HEADS = ("embed", "classify2", "regress")


@dataclass(frozen=True)
class MlpSpec:
    hidden: int
    layers: int

    def to_dict(self):
        return {"hidden": self.hidden, "layers": self.layers}


def _mlp_spec(value) -> MlpSpec:
    if isinstance(value, MlpSpec):
        return value
    if isinstance(value, dict):
        return MlpSpec(int(value["hidden"]), int(value["layers"]))
    hidden, layers = value
    return MlpSpec(int(hidden), int(layers))


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the stereocenter
    classification column of the tuned-hyperparameter table."""

    node_dim: int = 52
    edge_dim: int = 14
    h_dims: tuple[int, ...] = (32, 64, 64, 32)  # h_0 then one width per GAT layer
    gat_layers: int = 3
    gat_heads: int = 4
    f_e: MlpSpec = field(default_factory=lambda: MlpSpec(64, 1))
    f_d: MlpSpec = field(default_factory=lambda: MlpSpec(128, 2))
    f_angle: MlpSpec = field(default_factory=lambda: MlpSpec(128, 2))
    f_alpha: MlpSpec = field(default_factory=lambda: MlpSpec(128, 2))
    f_c: MlpSpec = field(default_factory=lambda: MlpSpec(128, 2))
    f_phase: MlpSpec = field(default_factory=lambda: MlpSpec(256, 2))
    f_out: MlpSpec = field(default_factory=lambda: MlpSpec(64, 2))
    f_cmp: MlpSpec = field(default_factory=lambda: MlpSpec(32, 1))
    z_dim: int = 32
    use_cmp: bool = False
    cmp_layers: int = 3
    cmp_heads: int = 2
    freeze_fc: bool = False
    freeze_fphase: bool = False
    mask_internal_coords: bool = False
    gamma_aux: float = 6.86e-3
    task_head: str = "classify2"
    leaky_slope: float = 0.01
    attention_slope: float = 0.2

    def __post_init__(self):
        for name in ("f_e", "f_d", "f_angle", "f_alpha", "f_c", "f_phase", "f_out", "f_cmp"):
            setattr(self, name, _mlp_spec(getattr(self, name)))
        self.h_dims = tuple(int(w) for w in self.h_dims)
        self.validate()

    def validate(self):
        if self.task_head not in HEADS:
            raise ValueError(f"unknown task head {self.task_head!r}")
        if len(self.h_dims) != self.gat_layers + 1:
            raise ValueError(
                f"h_dims must list h_0 plus one width per GAT layer: "
                f"{len(self.h_dims)} widths for {self.gat_layers} layers"
            )
        if any(w < 1 for w in self.h_dims) or self.z_dim < 1:
            raise ValueError("all widths must be >= 1")
        for t in range(1, self.gat_layers):  # hidden layers concatenate heads
            if self.h_dims[t] % self.gat_heads != 0:
                raise ValueError(
                    f"gat_heads={self.gat_heads} must divide hidden width {self.h_dims[t]}"
                )
        if self.use_cmp and self.h_dims[-1] % self.cmp_heads != 0:
            raise ValueError("cmp_heads must divide the final node width")
        if self.gamma_aux < 0:
            raise ValueError("gamma_aux must be >= 0")

    @property
    def out_width(self) -> int:
        return {"embed": 0, "classify2": 2, "regress": 1}[self.task_head]

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, MlpSpec):
                value = value.to_dict()
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = dict(d)
        if "h_dims" in kwargs:
            kwargs["h_dims"] = tuple(kwargs["h_dims"])
        return cls(**kwargs)


@dataclass
class Prepared:
    """Per-conformer constants: features, internal coordinates, and the
    index/scatter arrays the expression graph is assembled from."""

    conformer: Conformer
    node_x: np.ndarray
    edge_dir: np.ndarray          # (2m, edge_dim) one row per directed edge
    nbr_of_edge: np.ndarray       # (2m,) neighbor whose features flow in
    center_of_edge: np.ndarray    # (2m,) node receiving the message
    bond_of_edge: np.ndarray      # (2m,) undirected bond index
    att_src: np.ndarray           # (e,) attention pairs incl. self-loops
    att_dst: np.ndarray
    att_mask: np.ndarray          # (n, n) bool
    att_colsel: np.ndarray        # (e, n) one-hot of att_dst
    internal: InternalCoordinates
    dist_i2: np.ndarray
    dist_j2: np.ndarray
    dist_col2: np.ndarray         # (2m, 1)
    ang_i2: np.ndarray
    ang_j2: np.ndarray
    ang_k2: np.ndarray
    ang_cs2: np.ndarray           # (2a, 2) cos/sin of the bend angle
    tor_i: np.ndarray
    tor_x: np.ndarray
    tor_y: np.ndarray
    tor_j: np.ndarray
    tor_group: np.ndarray         # (t,) group index per torsion
    tor_cos: np.ndarray           # (t, 1)
    tor_sin: np.ndarray
    bond_x: np.ndarray            # (g,) internal bond endpoints, x < y
    bond_y: np.ndarray
    internal_bond_rows: np.ndarray  # (g,) position of each internal bond in the bond list

    @property
    def n_atoms(self) -> int:
        return self.conformer.n_atoms

    @property
    def n_groups(self) -> int:
        return len(self.bond_x)

    @property
    def n_torsions(self) -> int:
        return len(self.tor_i)


def prepare(conformer: Conformer, feature_config: FeatureConfig,
            chiral_tags: dict[int, str] | None = None) -> Prepared:
    feats = featurize(conformer, feature_config, chiral_tags)
    if conformer.n_atoms > 1:
        internal = enumerate_internal_coords(conformer)
    else:
        internal = InternalCoordinates(
            np.zeros((0, 2), dtype=np.int64), np.zeros(0),
            np.zeros((0, 3), dtype=np.int64), np.zeros(0), [],
        )
    n = conformer.n_atoms
    m = len(conformer.bonds)

    nbr, center, bond_idx, edir = [], [], [], []
    for b_idx, b in enumerate(conformer.bonds):
        for u, v in ((b.i, b.j), (b.j, b.i)):
            center.append(u)
            nbr.append(v)
            bond_idx.append(b_idx)
            edir.append(feats.edge_features[b_idx])
    nbr = np.array(nbr, dtype=np.int64)
    center = np.array(center, dtype=np.int64)
    bond_idx = np.array(bond_idx, dtype=np.int64)
    edir = np.array(edir, dtype=np.float64) if m else np.zeros((0, feature_config.edge_width))

    att_src = np.concatenate([center, np.arange(n, dtype=np.int64)])
    att_dst = np.concatenate([nbr, np.arange(n, dtype=np.int64)])
    mask = np.zeros((n, n), dtype=bool)
    mask[att_src, att_dst] = True
    colsel = np.zeros((len(att_src), n))
    colsel[np.arange(len(att_src)), att_dst] = 1.0

    pairs = internal.bond_pairs
    dist_i2 = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dist_j2 = np.concatenate([pairs[:, 1], pairs[:, 0]])
    dist_col2 = np.concatenate([internal.bond_lengths, internal.bond_lengths])[:, None]

    trip = internal.angle_triples
    ang_i2 = np.concatenate([trip[:, 0], trip[:, 2]])
    ang_j2 = np.concatenate([trip[:, 1], trip[:, 1]])
    ang_k2 = np.concatenate([trip[:, 2], trip[:, 0]])
    cs = np.stack([np.cos(internal.angle_values), np.sin(internal.angle_values)], axis=1)
    ang_cs2 = np.concatenate([cs, cs], axis=0)

    tor_i, tor_x, tor_y, tor_j, tor_group = [], [], [], [], []
    bond_x, bond_y, internal_rows = [], [], []
    psi = []
    bond_row = {(b.i, b.j): r for r, b in enumerate(conformer.bonds)}
    for g, group in enumerate(internal.torsion_groups):
        x, y = group.bond
        bond_x.append(x)
        bond_y.append(y)
        internal_rows.append(bond_row[(x, y)])
        for (i, j), angle in zip(group.pairs, group.angles):
            tor_i.append(i)
            tor_x.append(x)
            tor_y.append(y)
            tor_j.append(j)
            tor_group.append(g)
            psi.append(angle)
    psi = np.array(psi, dtype=np.float64)

    return Prepared(
        conformer=conformer,
        node_x=feats.node_features,
        edge_dir=edir,
        nbr_of_edge=nbr,
        center_of_edge=center,
        bond_of_edge=bond_idx,
        att_src=att_src,
        att_dst=att_dst,
        att_mask=mask,
        att_colsel=colsel,
        internal=internal,
        dist_i2=dist_i2,
        dist_j2=dist_j2,
        dist_col2=dist_col2,
        ang_i2=ang_i2,
        ang_j2=ang_j2,
        ang_k2=ang_k2,
        ang_cs2=ang_cs2,
        tor_i=np.array(tor_i, dtype=np.int64),
        tor_x=np.array(tor_x, dtype=np.int64),
        tor_y=np.array(tor_y, dtype=np.int64),
        tor_j=np.array(tor_j, dtype=np.int64),
        tor_group=np.array(tor_group, dtype=np.int64),
        tor_cos=np.cos(psi)[:, None],
        tor_sin=np.sin(psi)[:, None],
        bond_x=np.array(bond_x, dtype=np.int64),
        bond_y=np.array(bond_y, dtype=np.int64),
        internal_bond_rows=np.array(internal_rows, dtype=np.int64),
    )


@dataclass
class GraphRoots:
    """Expression handles for one conformer's forward graph."""

    prepared: Prepared
    node_states: Expression
    distance_latent: Expression
    angle_latent: Expression
    torsion_latent: Expression
    prediction: Expression
    sum_nodes: Expression
    radii: Expression | None = None          # (g, 1)
    phase_norms: Expression | None = None    # (t, 1)
    coeffs: Expression | None = None         # (t, 1)
    phase_cos: Expression | None = None      # (t, 1)
    phase_sin: Expression | None = None      # (t, 1)
    per_bond_latent: Expression | None = None  # (g, z_dim)


@dataclass
class ModelOutput:
    node_states: np.ndarray
    distance_latent: np.ndarray
    angle_latent: np.ndarray
    torsion_latent: np.ndarray
    radii: np.ndarray                  # (n_internal_bonds,)
    phase_norms: np.ndarray | None     # (n_torsions,) unnormalized phase-vector norms
    prediction: np.ndarray


class Model:
    """Configuration plus parameter store, with graph building attached."""

    def __init__(self, config: ModelConfig, feature_config: FeatureConfig,
                 store: ParameterStore):
        if config.node_dim != feature_config.node_width:
            raise ValueError(
                f"node_dim {config.node_dim} != featurizer width {feature_config.node_width}"
            )
        if config.edge_dim != feature_config.edge_width:
            raise ValueError(
                f"edge_dim {config.edge_dim} != featurizer width {feature_config.edge_width}"
            )
        self.config = config
        self.feature_config = feature_config
        self.store = store

    # -- parameter initialization -------------------------------------------

    @classmethod
    def initialize(cls, config: ModelConfig, feature_config: FeatureConfig,
                   seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        store = ParameterStore()

        def mat(name, fan_in, fan_out, trainable=True):
            store.create(name, ad.glorot(rng, fan_in, fan_out, (fan_in, fan_out)), trainable)

        def mlp(prefix, in_dim, spec: MlpSpec, out_dim, trainable=True):
            dims = [in_dim] + [spec.hidden] * spec.layers + [out_dim]
            for k in range(len(dims) - 1):
                mat(f"{prefix}.w{k}", dims[k], dims[k + 1], trainable)
                store.create(f"{prefix}.b{k}", np.zeros((1, dims[k + 1])), trainable)

        cfg = config
        h = cfg.h_dims
        mlp("econv.f_e", cfg.edge_dim, cfg.f_e, cfg.node_dim)
        mat("econv.theta", cfg.node_dim, h[0])
        mat("econv.proj", cfg.node_dim, h[0])
        for t in range(1, cfg.gat_layers + 1):
            is_final = t == cfg.gat_layers
            head_dim = h[t] if is_final else h[t] // cfg.gat_heads
            for k in range(cfg.gat_heads):
                mat(f"gat{t}.h{k}.w", h[t - 1], head_dim)
                mat(f"gat{t}.h{k}.a_src", head_dim, 1)
                mat(f"gat{t}.h{k}.a_dst", head_dim, 1)
        ht = h[-1]
        mlp("enc_d", 2 * ht + 1, cfg.f_d, cfg.z_dim)
        mlp("enc_angle", 3 * ht + 2, cfg.f_angle, cfg.z_dim)
        mlp("coeff", 4 * ht, cfg.f_c, 1, trainable=not cfg.freeze_fc)
        mlp("phase", 4 * ht, cfg.f_phase, 2, trainable=not cfg.freeze_fphase)
        mlp("enc_alpha", 2 * ht + 1, cfg.f_alpha, cfg.z_dim)
        if cfg.use_cmp:
            mlp("cmp.f", cfg.z_dim, cfg.f_cmp, ht)
            mat("cmp.theta", ht, ht)
            mat("cmp.proj", ht, ht)
            for t in range(1, cfg.cmp_layers + 1):
                is_final = t == cfg.cmp_layers
                head_dim = ht if is_final else ht // cfg.cmp_heads
                for k in range(cfg.cmp_heads):
                    mat(f"cmpgat{t}.h{k}.w", ht, head_dim)
                    mat(f"cmpgat{t}.h{k}.a_src", head_dim, 1)
                    mat(f"cmpgat{t}.h{k}.a_dst", head_dim, 1)
        if cfg.task_head != "embed":
            mlp("out", ht + 3 * cfg.z_dim, cfg.f_out, cfg.out_width)
        return cls(config, feature_config, store)

    # -- graph building ------------------------------------------------------

    def _mlp(self, x: Expression, prefix: str, spec: MlpSpec) -> Expression:
        k = 0
        for _ in range(spec.layers):
            x = ad.leaky_relu(
                ad.add(
                    ad.matmul(x, ad.parameter(self.store, f"{prefix}.w{k}")),
                    ad.parameter(self.store, f"{prefix}.b{k}"),
                ),
                self.config.leaky_slope,
            )
            k += 1
        return ad.add(
            ad.matmul(x, ad.parameter(self.store, f"{prefix}.w{k}")),
            ad.parameter(self.store, f"{prefix}.b{k}"),
        )

    def _gat_layer(self, h: Expression, prep: Prepared, prefix: str,
                   n_heads: int, head_dim: int, merge: str) -> Expression:
        n = prep.n_atoms
        ones_row = ad.constant(np.ones((1, n)))
        heads = []
        for k in range(n_heads):
            w = ad.parameter(self.store, f"{prefix}.h{k}.w")
            wh = ad.matmul(h, w)
            src_score = ad.matmul(wh, ad.parameter(self.store, f"{prefix}.h{k}.a_src"))
            dst_score = ad.matmul(wh, ad.parameter(self.store, f"{prefix}.h{k}.a_dst"))
            logits = ad.leaky_relu(
                ad.add(
                    ad.gather_rows(src_score, prep.att_src),
                    ad.gather_rows(dst_score, prep.att_dst),
                ),
                self.config.attention_slope,
            )
            dense = ad.scatter_add_rows(
                ad.mul(ad.matmul(logits, ones_row), ad.constant(prep.att_colsel)),
                prep.att_src,
                n,
            )
            attn = ad.softmax(dense, axis=1, mask=prep.att_mask)
            heads.append(ad.matmul(attn, wh))
        if merge == "concat":
            merged = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
        else:
            merged = heads[0]
            for extra in heads[1:]:
                merged = ad.add(merged, extra)
            if len(heads) > 1:
                merged = ad.mul(merged, ad.constant(np.full((n, head_dim), 1.0 / len(heads))))
        return ad.leaky_relu(merged, self.config.leaky_slope)

    def build(self, prep: Prepared, head: str | None = None,
              zero_phases: bool = False) -> GraphRoots:
        """Assemble the forward graph for one conformer.

        `zero_phases` replaces the learned phase shifts with zero (used by
        the mirror-symmetry checks).
        """
        cfg = self.config
        head = head or cfg.task_head
        n = prep.n_atoms
        m = len(prep.conformer.bonds)
        masked = cfg.mask_internal_coords

        x = ad.constant(prep.node_x)
        # edge-conditioned embedding
        theta_x = ad.matmul(x, ad.parameter(self.store, "econv.theta"))
        if m:
            filt = self._mlp(ad.constant(prep.edge_dir), "econv.f_e", cfg.f_e)
            msgs = ad.mul(ad.gather_rows(x, prep.nbr_of_edge), filt)
            agg = ad.scatter_add_rows(msgs, prep.center_of_edge, n)
            h = ad.add(theta_x, ad.matmul(agg, ad.parameter(self.store, "econv.proj")))
        else:
            h = theta_x
        # attention stack
        for t in range(1, cfg.gat_layers + 1):
            is_final = t == cfg.gat_layers
            head_dim = cfg.h_dims[t] if is_final else cfg.h_dims[t] // cfg.gat_heads
            h = self._gat_layer(
                h, prep, f"gat{t}", cfg.gat_heads, head_dim,
                "average" if is_final else "concat",
            )

        # distance encoder
        if m:
            dcol = ad.constant(np.zeros_like(prep.dist_col2) if masked else prep.dist_col2)
            rows = ad.concat(
                [ad.gather_rows(h, prep.dist_i2), ad.gather_rows(h, prep.dist_j2), dcol],
                axis=1,
            )
            z_d = ad.sum_rows(self._mlp(rows, "enc_d", cfg.f_d))
        else:
            z_d = ad.constant(np.zeros((1, cfg.z_dim)))

        # angle encoder
        if len(prep.ang_i2):
            cs = ad.constant(np.zeros_like(prep.ang_cs2) if masked else prep.ang_cs2)
            rows = ad.concat(
                [
                    ad.gather_rows(h, prep.ang_i2),
                    ad.gather_rows(h, prep.ang_j2),
                    ad.gather_rows(h, prep.ang_k2),
                    cs,
                ],
                axis=1,
            )
            z_phi = ad.sum_rows(self._mlp(rows, "enc_angle", cfg.f_angle))
        else:
            z_phi = ad.constant(np.zeros((1, cfg.z_dim)))

        # torsion encoder
        g = prep.n_groups
        t_count = prep.n_torsions
        coeffs = phase_cos = phase_sin = phase_norms = None
        radii_expr = per_bond = None
        if g and not masked:
            sym = np.concatenate([np.arange(t_count), np.arange(t_count)])
            rows_f = ad.concat(
                [ad.gather_rows(h, idx) for idx in (prep.tor_i, prep.tor_x, prep.tor_y, prep.tor_j)],
                axis=1,
            )
            rows_r = ad.concat(
                [ad.gather_rows(h, idx) for idx in (prep.tor_j, prep.tor_y, prep.tor_x, prep.tor_i)],
                axis=1,
            )
            rows = ad.concat([rows_f, rows_r], axis=0)
            coeffs = ad.sigmoid(
                ad.scatter_add_rows(self._mlp(rows, "coeff", cfg.f_c), sym, t_count)
            )
            if zero_phases:
                phase_cos = ad.constant(np.ones((t_count, 1)))
                phase_sin = ad.constant(np.zeros((t_count, 1)))
            else:
                raw = ad.scatter_add_rows(self._mlp(rows, "phase", cfg.f_phase), sym, t_count)
                phase_norms = ad.l2_norm(raw)
                unit = ad.l2_normalize(raw, epsilon=1e-12)
                phase_cos = ad.matmul(unit, ad.constant(np.array([[1.0], [0.0]])))
                phase_sin = ad.matmul(unit, ad.constant(np.array([[0.0], [1.0]])))
            cos_psi = ad.constant(prep.tor_cos)
            sin_psi = ad.constant(prep.tor_sin)
            # angle addition keeps gradients flowing through the learned phases
            cos_total = ad.sub(ad.mul(cos_psi, phase_cos), ad.mul(sin_psi, phase_sin))
            sin_total = ad.add(ad.mul(sin_psi, phase_cos), ad.mul(cos_psi, phase_sin))
            alpha_cos = ad.scatter_add_rows(ad.mul(coeffs, cos_total), prep.tor_group, g)
            alpha_sin = ad.scatter_add_rows(ad.mul(coeffs, sin_total), prep.tor_group, g)
            radii_expr = ad.sqrt(ad.add(ad.square(alpha_cos), ad.square(alpha_sin)))
        elif g:
            radii_expr = ad.constant(np.zeros((g, 1)))

        if g:
            bx2 = np.concatenate([prep.bond_x, prep.bond_y])
            by2 = np.concatenate([prep.bond_y, prep.bond_x])
            rad2 = ad.concat([radii_expr, radii_expr], axis=0)
            rows = ad.concat(
                [ad.gather_rows(h, bx2), ad.gather_rows(h, by2), rad2], axis=1
            )
            per_bond = ad.scatter_add_rows(
                self._mlp(rows, "enc_alpha", cfg.f_alpha),
                np.concatenate([np.arange(g), np.arange(g)]),
                g,
            )
            z_alpha = ad.sum_rows(per_bond)
        else:
            z_alpha = ad.constant(np.zeros((1, cfg.z_dim)))

        # optional chiral message passing before readout
        readout_nodes = h
        if cfg.use_cmp:
            if g:
                z_bond_full = ad.scatter_add_rows(per_bond, prep.internal_bond_rows, m)
            else:
                z_bond_full = ad.constant(np.zeros((max(m, 1), cfg.z_dim)))
            if m:
                edge_attr = ad.gather_rows(z_bond_full, prep.bond_of_edge)
                filt = self._mlp(edge_attr, "cmp.f", cfg.f_cmp)
                msgs = ad.mul(ad.gather_rows(h, prep.nbr_of_edge), filt)
                agg = ad.scatter_add_rows(msgs, prep.center_of_edge, n)
                hc = ad.add(
                    ad.matmul(h, ad.parameter(self.store, "cmp.theta")),
                    ad.matmul(agg, ad.parameter(self.store, "cmp.proj")),
                )
            else:
                hc = ad.matmul(h, ad.parameter(self.store, "cmp.theta"))
            ht = cfg.h_dims[-1]
            for t in range(1, cfg.cmp_layers + 1):
                is_final = t == cfg.cmp_layers
                head_dim = ht if is_final else ht // cfg.cmp_heads
                hc = self._gat_layer(
                    hc, prep, f"cmpgat{t}", cfg.cmp_heads, head_dim,
                    "average" if is_final else "concat",
                )
            readout_nodes = hc

        sum_nodes = ad.sum_rows(readout_nodes)
        if head == "embed":
            prediction = z_alpha
        else:
            feed = ad.concat([sum_nodes, z_d, z_phi, z_alpha], axis=1)
            prediction = self._mlp(feed, "out", cfg.f_out)

        return GraphRoots(
            prepared=prep,
            node_states=readout_nodes,
            distance_latent=z_d,
            angle_latent=z_phi,
            torsion_latent=z_alpha,
            prediction=prediction,
            sum_nodes=sum_nodes,
            radii=radii_expr,
            phase_norms=phase_norms,
            coeffs=coeffs,
            phase_cos=phase_cos,
            phase_sin=phase_sin,
            per_bond_latent=per_bond,
        )

    # -- numeric forward -----------------------------------------------------

    def prepare(self, conformer: Conformer) -> Prepared:
        return prepare(conformer, self.feature_config)

    def forward(self, conformer_or_prepared, head: str | None = None,
                zero_phases: bool = False) -> ModelOutput:
        prep = conformer_or_prepared
        if isinstance(prep, Conformer):
            prep = self.prepare(prep)
        roots = self.build(prep, head=head, zero_phases=zero_phases)
        order = [
            roots.node_states, roots.distance_latent, roots.angle_latent,
            roots.torsion_latent, roots.prediction,
        ]
        optional = [roots.radii, roots.phase_norms]
        exprs = order + [e for e in optional if e is not None]
        ad.evaluate_many(exprs, self.store)
        radii = (
            roots.radii.value.ravel().copy()
            if roots.radii is not None
            else np.zeros(0)
        )
        norms = (
            roots.phase_norms.value.ravel().copy()
            if roots.phase_norms is not None
            else None
        )
        return ModelOutput(
            node_states=roots.node_states.value.copy(),
            distance_latent=roots.distance_latent.value.ravel().copy(),
            angle_latent=roots.angle_latent.value.ravel().copy(),
            torsion_latent=roots.torsion_latent.value.ravel().copy(),
            radii=radii,
            phase_norms=norms,
            prediction=roots.prediction.value.ravel().copy(),
        )

    # -- checkpointing -------------------------------------------------------

    def checkpoint_dict(self, extra: dict | None = None) -> dict:
        payload = {
            "format": "chiralnet.checkpoint",
            "version": 1,
            "model_config": self.config.to_dict(),
            "feature_config": self.feature_config.to_dict(),
            "params": self.store.to_dict(),
        }
        if extra:
            payload.update(extra)
        return payload

    def save(self, path, extra: dict | None = None):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.checkpoint_dict(extra), fh)

    @classmethod
    def load(cls, path) -> "Model":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != "chiralnet.checkpoint":
            raise ValueError("not a model checkpoint")
        if payload.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
        config = ModelConfig.from_dict(payload["model_config"])
        feature_config = FeatureConfig.from_dict(payload["feature_config"])
        store = ParameterStore.from_dict(payload["params"])
        model = cls(config, feature_config, store)
        model.validate_shapes()
        return model

    def validate_shapes(self):
        """Rebuild a fresh store from the config and compare every slot."""
        reference = Model.initialize(self.config, self.feature_config, seed=0).store
        ref_names = reference.names()
        names = self.store.names()
        if names != ref_names:
            missing = set(ref_names) - set(names)
            extra = set(names) - set(ref_names)
            raise ValueError(
                f"checkpoint slots do not match config (missing {sorted(missing)}, "
                f"unexpected {sorted(extra)})"
            )
        for name in names:
            if self.store[name].shape != reference[name].shape:
                raise ValueError(
                    f"checkpoint slot {name!r} has shape {self.store[name].shape}, "
                    f"config implies {reference[name].shape}"
                )

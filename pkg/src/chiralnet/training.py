"""Losses, batch construction, Adam with gradient clipping, the epoch
loop with validation-based model selection, and evaluation metrics.

Batch schemes follow the grouped structure of the data: contrastive
batches hold (anchor, positive, negative) conformer triplets where anchor
and positive share a stereoisomer and the negative is a sibling
stereoisomer of the same 2D graph; the supervised tasks batch both
members of each enantiomer pair together. Every task adds the auxiliary
phase-norm loss gamma_aux * mean |1 - ||phase vector|||, which keeps the
unnormalized phase predictions near the unit circle.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import GraphRoots, Model, Prepared
from .molio import Conformer
from .synthgen import SplitManifest

TASKS = ("contrastive", "rs", "classify2", "rank_regress")
SCHEMES = ("resample_conformer", "fixed_conformer")


class TrainingError(RuntimeError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dataset indexing


@dataclass
class DatasetIndex:
    """Records grouped by graph and stereoisomer, with prepared-graph
    caching attached to the owning model's featurizer."""

    records: list[Conformer]
    by_graph: dict[str, dict[str, list[int]]]
    stereoisomers: list[str]
    conformers_of: dict[str, list[int]]
    graph_of: dict[str, str]

    @classmethod
    def from_records(cls, records: list[Conformer]) -> "DatasetIndex":
        by_graph: dict[str, dict[str, list[int]]] = {}
        conformers_of: dict[str, list[int]] = {}
        graph_of: dict[str, str] = {}
        for idx, rec in enumerate(records):
            by_graph.setdefault(rec.graph_id, {}).setdefault(rec.stereoisomer_id, []).append(idx)
            conformers_of.setdefault(rec.stereoisomer_id, []).append(idx)
            prior = graph_of.setdefault(rec.stereoisomer_id, rec.graph_id)
            if prior != rec.graph_id:
                raise DataError(
                    f"stereoisomer {rec.stereoisomer_id!r} appears under two graphs"
                )
        return cls(records, by_graph, sorted(conformers_of), conformers_of, graph_of)

    def siblings(self, sid: str) -> list[str]:
        return [s for s in self.by_graph[self.graph_of[sid]] if s != sid]

    def fixed_conformer(self, sid: str) -> int:
        return self.conformers_of[sid][0]

    def subset(self, graph_ids) -> "DatasetIndex":
        wanted = set(graph_ids)
        return DatasetIndex.from_records(
            [r for r in self.records if r.graph_id in wanted]
        )


def split_dataset(records: list[Conformer], manifest: SplitManifest):
    """Partition by graph id; refuses manifests that put one graph in two
    partitions or reference unknown graphs."""
    partition = {}
    for part in ("train", "val", "test"):
        for gid in getattr(manifest, part):
            if gid in partition:
                raise DataError(f"graph {gid!r} assigned to both {partition[gid]} and {part}")
            partition[gid] = part
    buckets: dict[str, list[Conformer]] = {"train": [], "val": [], "test": []}
    for rec in records:
        part = partition.get(rec.graph_id)
        if part is None:
            raise DataError(f"graph {rec.graph_id!r} missing from the split manifest")
        buckets[part].append(rec)
    return (
        DatasetIndex.from_records(buckets["train"]),
        DatasetIndex.from_records(buckets["val"]),
        DatasetIndex.from_records(buckets["test"]),
    )


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    task: str
    items: list  # contrastive: (a, p, n) record triples; paired: record indices


def _check_contrastive(index: DatasetIndex, sid: str):
    if len(index.conformers_of[sid]) < 2:
        raise DataError(f"stereoisomer {sid!r} has fewer than 2 conformers")
    if not index.siblings(sid):
        raise DataError(f"stereoisomer {sid!r} has no sibling stereoisomer")


def _triplet(index: DatasetIndex, sid: str, rng: np.random.Generator):
    _check_contrastive(index, sid)
    conformers = index.conformers_of[sid]
    a, p = rng.choice(len(conformers), size=2, replace=False)
    sibling = index.siblings(sid)
    neg_sid = sibling[rng.integers(len(sibling))]
    neg_list = index.conformers_of[neg_sid]
    n = neg_list[rng.integers(len(neg_list))]
    return conformers[a], conformers[p], n


def _paired_draw(index: DatasetIndex, sid: str, scheme: str, rng: np.random.Generator):
    siblings = index.siblings(sid)
    if not siblings:
        raise DataError(f"stereoisomer {sid!r} has no mirror partner in the dataset")
    partner = siblings[rng.integers(len(siblings))]
    out = []
    for s in (sid, partner):
        if scheme == "fixed_conformer":
            out.append(index.fixed_conformer(s))
        else:
            conformers = index.conformers_of[s]
            out.append(conformers[rng.integers(len(conformers))])
    return out


def sample_batch(index: DatasetIndex, task: str, batch_size: int, scheme: str,
                 rng: np.random.Generator, stereoisomers=None) -> Batch:
    """Draw one batch. Without an explicit stereoisomer subset, batch_size
    stereoisomers are drawn uniformly without replacement."""
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    if scheme not in SCHEMES:
        raise DataError(f"unknown scheme {scheme!r}")
    if stereoisomers is None:
        pool = index.stereoisomers
        picks = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
        stereoisomers = [pool[k] for k in picks]
    items = []
    for sid in stereoisomers:
        if task == "contrastive":
            items.append(_triplet(index, sid, rng))
        else:
            items.extend(_paired_draw(index, sid, scheme, rng))
    return Batch(task, items)


def epoch_batches(index: DatasetIndex, task: str, batch_size: int, scheme: str,
                  rng: np.random.Generator):
    """Random partition of the stereoisomers into batches for one epoch."""
    order = list(index.stereoisomers)
    rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        yield sample_batch(index, task, len(chunk), scheme, rng, stereoisomers=chunk)


# ---------------------------------------------------------------------------
# losses


def _normalized_distance(za, zp):
    return ad.l2_norm(ad.sub(ad.l2_normalize(za, 1e-12), ad.l2_normalize(zp, 1e-12)))


def triplet_term(za, zp, zn, margin: float = 1.0):
    """max(0, d(a, p) - d(a, n) + margin) on unit-normalized embeddings."""
    gap = ad.sub(_normalized_distance(za, zp), _normalized_distance(za, zn))
    return ad.max_with_zero(ad.add(gap, ad.constant(np.full((1, 1), margin))))


def _aux_loss(outputs: list[GraphRoots], gamma: float):
    norms = [o.phase_norms for o in outputs if o.phase_norms is not None]
    if not norms:
        return ad.scalar(0.0)
    stacked = norms[0] if len(norms) == 1 else ad.concat(norms, axis=0)
    ones = ad.constant(np.ones(stacked.shape))
    deviation = ad.add(
        ad.max_with_zero(ad.sub(ones, stacked)),
        ad.max_with_zero(ad.sub(stacked, ones)),
    )
    return ad.mul(ad.scalar(gamma), ad.mean_all(deviation))


def compute_loss(task: str, outputs, targets, gamma_aux: float):
    """Scalar loss expression for one batch.

    contrastive: outputs are GraphRoots triples, targets ignored.
    rs / classify2: outputs are GraphRoots, targets are 0/1 ints.
    rank_regress: outputs are GraphRoots, targets are float scores.
    Every task adds gamma_aux * mean |1 - phase norm| over all torsion
    phase predictions in the batch.
    """
    if task == "contrastive":
        terms = [
            triplet_term(a.prediction, p.prediction, n.prediction)
            for a, p, n in outputs
        ]
        main = ad.mean_all(ad.concat(terms, axis=0) if len(terms) > 1 else terms[0])
        flat = [root for triple in outputs for root in triple]
        return ad.add(main, _aux_loss(flat, gamma_aux))
    if task in ("rs", "classify2"):
        logits = ad.concat([o.prediction for o in outputs], axis=0)
        labels = np.asarray(targets, dtype=np.int64)
        onehot = np.zeros((len(outputs), 2))
        onehot[np.arange(len(outputs)), labels] = 1.0
        picked = ad.sum_cols(ad.mul(ad.softmax(logits, axis=1), ad.constant(onehot)))
        main = ad.neg(ad.mean_all(ad.log(picked)))
        return ad.add(main, _aux_loss(outputs, gamma_aux))
    if task == "rank_regress":
        preds = ad.concat([o.prediction for o in outputs], axis=0)
        target = ad.constant(np.asarray(targets, dtype=np.float64).reshape(-1, 1))
        main = ad.mean_all(ad.square(ad.sub(preds, target)))
        return ad.add(main, _aux_loss(outputs, gamma_aux))
    raise DataError(f"unknown task {task!r}")


def target_for(task: str, record: Conformer):
    if task == "rs":
        if record.labels.rs is None:
            raise DataError(f"record {record.stereoisomer_id!r} has no R/S label")
        return 1 if record.labels.rs == "R" else 0
    if task == "classify2":
        if record.labels.class_label is None:
            raise DataError(f"record {record.stereoisomer_id!r} has no class label")
        return int(record.labels.class_label)
    if task == "rank_regress":
        if record.labels.score is None:
            raise DataError(f"record {record.stereoisomer_id!r} has no score")
        return float(record.labels.score)
    raise DataError(f"task {task!r} has no per-record target")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class TrainState:
    store: "ad.ParameterStore"
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_metric: float | None = None
    best_store: "ad.ParameterStore | None" = None

    def __post_init__(self):
        for name in self.store.trainable_names():
            self.m.setdefault(name, np.zeros_like(self.store[name]))
            self.v.setdefault(name, np.zeros_like(self.store[name]))


def clip_gradients(grads: dict, names, max_norm: float) -> float:
    """Scale the listed gradients so the global L2 norm is <= max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for name in names:
        g = grads[name]
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for name in names:
            grads[name] = grads[name] * scale
    return norm


def optimizer_step(state: TrainState, grads: dict, lr: float,
                   max_grad_norm: float = 10.0,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Global-norm clipping followed by one Adam update. Frozen slots are
    untouched; non-finite gradients abort with the slot name."""
    names = [n for n in state.store.trainable_names() if n in grads]
    for name in names:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"non-finite gradient in slot {name!r}")
    clip_gradients(grads, names, max_grad_norm)
    state.step += 1
    t = state.step
    for name in names:
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * (g * g)
        m_hat = state.m[name] / (1 - beta1**t)
        v_hat = state.v[name] / (1 - beta2**t)
        state.store.set_value(
            name, state.store[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        )


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainOptions:
    task: str = "rs"
    lr: float = 5.69e-4
    batch_size: int = 16
    epochs: int | None = None  # per-task default applied when None
    scheme: str = "resample_conformer"
    seed: int = 0
    max_grad_norm: float = 10.0
    val_triplets_per_stereoisomer: int = 1

    DEFAULT_EPOCHS = {"contrastive": 50, "rs": 100, "classify2": 100, "rank_regress": 150}

    def resolved_epochs(self) -> int:
        return self.epochs if self.epochs is not None else self.DEFAULT_EPOCHS[self.task]

    def to_dict(self) -> dict:
        return {
            "task": self.task, "lr": self.lr, "batch_size": self.batch_size,
            "epochs": self.resolved_epochs(), "scheme": self.scheme,
            "seed": self.seed, "max_grad_norm": self.max_grad_norm,
            "val_triplets_per_stereoisomer": self.val_triplets_per_stereoisomer,
        }


@dataclass
class FitResult:
    best_store: "ad.ParameterStore"
    log: list[dict]
    best_metric: float | None
    final_store: "ad.ParameterStore"


class _PrepCache:
    """Prepared-graph cache keyed by record index."""

    def __init__(self, model: Model, index: DatasetIndex):
        self.model = model
        self.index = index
        self._cache: dict[int, Prepared] = {}

    def get(self, record_idx: int) -> Prepared:
        prep = self._cache.get(record_idx)
        if prep is None:
            prep = self.model.prepare(self.index.records[record_idx])
            self._cache[record_idx] = prep
        return prep


def _metric_direction(task: str) -> int:
    """+1 when larger validation metric is better."""
    return -1 if task == "contrastive" else 1


def _sample_val_triplets(index: DatasetIndex, rng: np.random.Generator, per_sid: int):
    triplets = []
    for sid in index.stereoisomers:
        for _ in range(per_sid):
            triplets.append(_triplet(index, sid, rng))
    return triplets


def fit(model: Model, train_index: DatasetIndex, val_index: DatasetIndex,
        options: TrainOptions) -> FitResult:
    """Epoch loop: train on a full random partition per epoch, evaluate the
    task's validation metric, and keep the best checkpoint.

    Validation metrics: mean triplet loss (without the auxiliary loss) on
    triplets fixed once per run for contrastive; all-conformer accuracy for
    the classification tasks; conformer-averaged pairwise ranking accuracy
    for rank_regress. Deterministic for a fixed seed; log records carry
    {epoch, train_loss, val_metric, phase_norm_mean, wall_time_s}.
    """
    task = options.task
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    rng = np.random.default_rng(options.seed)
    state = TrainState(store=model.store)
    train_cache = _PrepCache(model, train_index)
    val_cache = _PrepCache(model, val_index)
    gamma = model.config.gamma_aux
    head = model.config.task_head

    val_triplets = None
    if task == "contrastive":
        val_triplets = _sample_val_triplets(
            val_index, np.random.default_rng(options.seed + 1),
            options.val_triplets_per_stereoisomer,
        )

    def batch_outputs(batch: Batch):
        if task == "contrastive":
            return [
                tuple(model.build(train_cache.get(i), head=head) for i in triple)
                for triple in batch.items
            ]
        return [model.build(train_cache.get(i), head=head) for i in batch.items]

    def batch_targets(batch: Batch):
        if task == "contrastive":
            return None
        return [target_for(task, train_index.records[i]) for i in batch.items]

    log: list[dict] = []
    direction = _metric_direction(task)
    best_metric = None
    best_store = model.store.copy()
    epochs = options.resolved_epochs()
    for epoch in range(epochs):
        t_start = time.perf_counter()
        losses = []
        norm_sums, norm_counts = 0.0, 0
        for batch in epoch_batches(train_index, task, options.batch_size,
                                   options.scheme, rng):
            outputs = batch_outputs(batch)
            loss = compute_loss(task, outputs, batch_targets(batch), gamma)
            grads = ad.gradients(loss, model.store)
            losses.append(float(loss.value))
            flat = (
                [r for triple in outputs for r in triple]
                if task == "contrastive"
                else outputs
            )
            for roots in flat:
                if roots.phase_norms is not None and roots.phase_norms.value is not None:
                    norm_sums += float(roots.phase_norms.value.sum())
                    norm_counts += roots.phase_norms.value.size
            optimizer_step(state, grads, options.lr, options.max_grad_norm)
        val_metric = _validation_metric(model, val_index, val_cache, task, val_triplets)
        if best_metric is None or direction * (val_metric - best_metric) > 0:
            best_metric = val_metric
            best_store = model.store.copy()
        log.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else None,
                "val_metric": val_metric,
                "phase_norm_mean": norm_sums / norm_counts if norm_counts else None,
                "wall_time_s": time.perf_counter() - t_start,
            }
        )
    return FitResult(best_store, log, best_metric, model.store)


def _validation_metric(model, val_index, val_cache, task, val_triplets):
    if task == "contrastive":
        losses = []
        for a, p, n in val_triplets:
            za, zp, zn = (
                model.forward(val_cache.get(i), head="embed").prediction
                for i in (a, p, n)
            )
            losses.append(_triplet_value(za, zp, zn))
        return float(np.mean(losses)) if losses else 0.0
    if task in ("rs", "classify2"):
        correct = 0
        for idx, rec in enumerate(val_index.records):
            pred = model.forward(val_cache.get(idx)).prediction
            correct += int(np.argmax(pred)) == target_for(task, rec)
        return correct / max(1, len(val_index.records))
    scores = {
        idx: float(model.forward(val_cache.get(idx)).prediction[0])
        for idx in range(len(val_index.records))
    }
    return _ranking_accuracy(val_index, scores)["accuracy"]


def _triplet_value(za, zp, zn, margin: float = 1.0) -> float:
    def unit(v):
        return v / np.sqrt((v * v).sum() + 1e-12)

    dap = np.linalg.norm(unit(za) - unit(zp))
    dan = np.linalg.norm(unit(za) - unit(zn))
    return max(0.0, dap - dan + margin)


# ---------------------------------------------------------------------------
# evaluation metrics


def _ranking_accuracy(index: DatasetIndex, conformer_scores: dict[int, float]):
    """Conformer-averaged per-stereoisomer scores, then pairwise ordering
    against ground truth. Exact ties count as incorrect (strict accuracy);
    a ties-as-half-credit variant is reported alongside for chance-level
    baselines whose predictions tie by construction."""
    mean_score = {}
    truth = {}
    for sid, idxs in index.conformers_of.items():
        mean_score[sid] = float(np.mean([conformer_scores[i] for i in idxs]))
        truth[sid] = index.records[idxs[0]].labels.score
    correct = 0.0
    half = 0.0
    total = 0
    gaps = []
    for gid, sids in index.by_graph.items():
        pair = sorted(sids)
        if len(pair) != 2:
            continue
        a, b = pair
        if truth[a] is None or truth[b] is None or truth[a] == truth[b]:
            continue
        total += 1
        gaps.append(abs(truth[a] - truth[b]))
        lower_true = a if truth[a] < truth[b] else b
        pa, pb = mean_score[a], mean_score[b]
        if pa == pb:
            half += 0.5
            continue
        lower_pred = a if pa < pb else b
        if lower_pred == lower_true:
            correct += 1
            half += 1
    return {
        "accuracy": correct / total if total else 0.0,
        "accuracy_ties_half": half / total if total else 0.0,
        "n_pairs": total,
        "gaps": gaps,
    }


def _ranking_margin_slices(index, conformer_scores, margins):
    mean_score = {}
    truth = {}
    for sid, idxs in index.conformers_of.items():
        mean_score[sid] = float(np.mean([conformer_scores[i] for i in idxs]))
        truth[sid] = index.records[idxs[0]].labels.score
    pairs = []
    for gid, sids in index.by_graph.items():
        pair = sorted(sids)
        if len(pair) != 2:
            continue
        a, b = pair
        if truth[a] is None or truth[b] is None or truth[a] == truth[b]:
            continue
        gap = abs(truth[a] - truth[b])
        lower_true = a if truth[a] < truth[b] else b
        pa, pb = mean_score[a], mean_score[b]
        good = pa != pb and (a if pa < pb else b) == lower_true
        pairs.append((gap, good))
    margins = list(margins)
    nearest = [
        min(range(len(margins)), key=lambda k: abs(margins[k] - gap))
        for gap, _ in pairs
    ]

    def acc(selection):
        chosen = [good for keep, (_, good) in zip(selection, pairs) if keep]
        return (sum(chosen) / len(chosen), len(chosen)) if chosen else (None, 0)

    slices = {"margins": margins, "ge": [], "le": [], "eq": []}
    for k, m in enumerate(margins):
        for panel, keep in (
            ("ge", [gap >= m for gap, _ in pairs]),
            ("le", [gap <= m for gap, _ in pairs]),
            ("eq", [nearest[p] == k for p in range(len(pairs))]),
        ):
            a, n = acc(keep)
            slices[panel].append({"margin": m, "accuracy": a, "n_pairs": n})
    return slices


def _linearly_separable(points_a: np.ndarray, points_b: np.ndarray) -> bool:
    """Exact separability via an LP feasibility problem:
    w . x + b >= +1 on A and <= -1 on B for some (w, b)."""
    from scipy.optimize import linprog

    dim = points_a.shape[1]
    rows = []
    for x in points_a:
        rows.append(np.concatenate([-x, [-1.0]]))
    for x in points_b:
        rows.append(np.concatenate([x, [1.0]]))
    a_ub = np.array(rows)
    b_ub = -np.ones(len(rows))
    bounds = [(-1e6, 1e6)] * (dim + 1)
    res = linprog(
        c=np.zeros(dim + 1), A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs"
    )
    return bool(res.success)


def evaluate_metrics(model: Model, records: list[Conformer], task: str,
                     margins=None, rng: np.random.Generator | None = None) -> dict:
    """Test metrics per task.

    Classification: accuracy over every conformer, no voting.
    Ranking: conformer-averaged pairwise accuracy plus accuracies sliced by
    ground-truth gap (>= m / <= m / nearest-to-m panels over `margins`).
    Contrastive: mean triplet loss over one sampled triplet family per
    stereoisomer and the fraction of enantiomer pairs whose conformer
    embedding clusters are linearly separable.
    """
    index = DatasetIndex.from_records(records)
    cache = _PrepCache(model, index)
    missing = [
        r.stereoisomer_id
        for r in records
        if task in ("rs", "classify2", "rank_regress")
        and _label_missing(r, task)
    ]
    if missing:
        raise DataError(f"records missing {task!r} labels: {sorted(set(missing))[:5]}")
    if task in ("rs", "classify2"):
        correct = 0
        for idx, rec in enumerate(index.records):
            pred = model.forward(cache.get(idx)).prediction
            correct += int(np.argmax(pred)) == target_for(task, rec)
        return {"task": task, "accuracy": correct / len(records), "n_conformers": len(records)}
    if task == "rank_regress":
        scores = {
            idx: float(model.forward(cache.get(idx)).prediction[0])
            for idx in range(len(index.records))
        }
        out = _ranking_accuracy(index, scores)
        gaps = out.pop("gaps")
        if margins is None:
            lo = min(gaps) if gaps else 0.3
            hi = max(gaps) if gaps else 2.0
            margins = list(np.round(np.linspace(lo, hi, 6), 6))
        out.update({"task": task, "margin_slices": _ranking_margin_slices(index, scores, margins)})
        return out
    if task == "contrastive":
        rng = rng or np.random.default_rng(0)
        embeddings = {
            idx: model.forward(cache.get(idx), head="embed").prediction
            for idx in range(len(index.records))
        }
        losses = [
            _triplet_value(*(embeddings[i] for i in _triplet(index, sid, rng)))
            for sid in index.stereoisomers
        ]
        separable = 0
        n_pairs = 0
        for gid, sids in index.by_graph.items():
            pair = sorted(sids)
            if len(pair) != 2:
                continue
            n_pairs += 1
            pa = np.array([embeddings[i] for i in index.conformers_of[pair[0]]])
            pb = np.array([embeddings[i] for i in index.conformers_of[pair[1]]])
            separable += _linearly_separable(pa, pb)
        return {
            "task": task,
            "triplet_loss": float(np.mean(losses)) if losses else None,
            "separable_fraction": separable / n_pairs if n_pairs else None,
            "n_pairs": n_pairs,
        }
    raise DataError(f"unknown task {task!r}")


def _label_missing(record: Conformer, task: str) -> bool:
    if task == "rs":
        return record.labels.rs is None
    if task == "classify2":
        return record.labels.class_label is None
    return record.labels.score is None

"""Iterative lottery pruning with rewinding: unit criteria, ranking, trimming and masking.

Trimming physically removes units: a layer keeps the output rows chosen for it and
the input columns kept by the preceding weight layer. Masking zeroes individual
weights and freezes them, leaving shapes intact.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import tensor as T
from .model import ModelGraph, Layer, count_params, cost_report, with_units
from .tasks import Dataset, TaskSpec
from .tensor import ContractError, ShapeError, Tensor
from .training import TrainConfig, evaluate, train

CRITERIA = ("magnitude", "activation", "batchnorm")
STRATEGIES = ("trim", "mask", "finetune")
SCOPES = ("local", "global")


class CriterionError(ValueError):
    """The criterion cannot be computed for this layer."""


@dataclass
class LotteryConfig:
    strategy: str = "trim"
    criterion: str = "magnitude"
    scope: str = "local"
    prune_rate: float = 0.30
    iterations: int = 15
    rewind_epoch_fraction: float = 0.5
    repetitions: int = 5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if not 0 < self.prune_rate < 1:
            raise ValueError(f"prune_rate must be in (0, 1), got {self.prune_rate}")
        if self.iterations < 1 or self.repetitions < 1:
            raise ValueError("iterations and repetitions must be at least 1")
        if not 0 <= self.rewind_epoch_fraction <= 1:
            raise ValueError("rewind_epoch_fraction must be in [0, 1]")


def _keep_fraction(rate):
    # exact decimal arithmetic: 0.7 * 30 must be 21, not 20.999...
    return 1 - Fraction(str(rate))


def keep_count(n, rate):
    """Units a layer keeps under local trimming: ceil((1 - rate) * n)."""
    return math.ceil(_keep_fraction(rate) * n)


def surviving_count(n, rate):
    """Weights left unmasked after one masking round: floor((1 - rate) * n)."""
    return math.floor(_keep_fraction(rate) * n)


# ---------------------------------------------------------------------------
# criteria


@dataclass
class CriterionScores:
    scores: dict  # prunable layer index -> (n_out,) non-negative scores
    criterion: str


def criterion_magnitude(layer: Layer) -> np.ndarray:
    """Sum of |W| over each unit's inputs (and kernel taps); bias excluded."""
    if "W" not in layer.params:
        raise CriterionError(f"{layer.kind} layer has no weights")
    W = layer.params["W"].data
    if layer.mask is not None:
        W = W * layer.mask
    return np.abs(W.astype(np.float64)).reshape(W.shape[0], -1).sum(axis=1)


def criterion_batchnorm(model: ModelGraph, i: int) -> np.ndarray:
    """|gamma| of the batch-norm that follows weight layer ``i``."""
    j = model.batchnorm_after(i)
    if j is None:
        raise CriterionError(f"layer {i} ({model.layers[i].kind}) is not followed by batch-norm")
    return np.abs(model.layers[j].params["gamma"].data.astype(np.float64))


def criterion_activation(model: ModelGraph, inputs, batch_size=256, layers=None) -> dict:
    """Per unit, the sum over examples (and time) of |post-activation output|."""
    if inputs is None or len(inputs) == 0:
        raise ContractError("activation criterion needs a non-empty validation set")
    layers = model.prunable_layers() if layers is None else list(layers)
    taps = {i: model.activation_tap(i) for i in layers}
    sums = {i: np.zeros(model.layers[i].width, dtype=np.float64) for i in layers}
    with T.no_grad():
        for start in range(0, len(inputs), batch_size):
            _, captured = model.forward(inputs[start : start + batch_size], "eval", taps=set(taps.values()))
            for i, j in taps.items():
                a = np.abs(captured[j].data.astype(np.float64))
                sums[i] += a.sum(axis=(0, 2)) if a.ndim == 3 else a.sum(axis=0)
    return sums


def compute_scores(model: ModelGraph, criterion: str, validation_inputs=None) -> CriterionScores:
    layers = model.prunable_layers()
    if criterion == "magnitude":
        scores = {i: criterion_magnitude(model.layers[i]) for i in layers}
    elif criterion == "batchnorm":
        scores = {i: criterion_batchnorm(model, i) for i in layers}
    elif criterion == "activation":
        scores = criterion_activation(model, validation_inputs, layers=layers)
    else:
        raise ValueError(f"unknown criterion {criterion!r}")
    return CriterionScores(scores, criterion)


# ---------------------------------------------------------------------------
# ranking and trimming


@dataclass
class TrimPlan:
    keep: dict  # prunable layer index -> sorted kept unit indices

    def widths(self):
        return {i: len(k) for i, k in self.keep.items()}


def full_plan(model: ModelGraph) -> TrimPlan:
    return TrimPlan({i: np.arange(model.layers[i].width) for i in model.prunable_layers()})


def rank_units(scores, scope="local", prune_rate=0.3) -> TrimPlan:
    """Choose kept units per layer.

    Local: each layer keeps its ceil((1-rate)*n) best units. Global: scores are
    divided by their layer sum, pooled, and the floor(rate*total) worst units are
    dropped, never emptying a layer. Ties keep the lower unit index.
    """
    if isinstance(scores, CriterionScores):
        scores = scores.scores
    if not 0 <= prune_rate < 1:
        raise ValueError(f"prune_rate must be in [0, 1), got {prune_rate}")
    layers = sorted(scores)
    arrays = {i: np.asarray(scores[i], dtype=np.float64) for i in layers}
    for i, s in arrays.items():
        if s.ndim != 1 or len(s) == 0 or (s < 0).any() or not np.isfinite(s).all():
            raise ValueError(f"layer {i}: scores must be a non-empty, finite, non-negative vector")
    if scope == "local":
        keep = {}
        for i, s in arrays.items():
            n_keep = keep_count(len(s), prune_rate)
            order = np.lexsort((np.arange(len(s)), -s))
            keep[i] = np.sort(order[:n_keep])
        return TrimPlan(keep)
    if scope != "global":
        raise ValueError(f"unknown scope {scope!r}")
    pos, unit, val = [], [], []
    for p, i in enumerate(layers):
        s = arrays[i]
        total = s.sum()
        norm = s / total if total > 0 else s
        pos.append(np.full(len(s), p))
        unit.append(np.arange(len(s)))
        val.append(norm)
    pos, unit, val = np.concatenate(pos), np.concatenate(unit), np.concatenate(val)
    n_drop = len(val) - math.ceil(_keep_fraction(prune_rate) * len(val))
    # worst first: lowest score, then highest unit index, then latest layer
    order = np.lexsort((-pos, -unit, val))
    remaining = {p: len(arrays[i]) for p, i in enumerate(layers)}
    dropped = np.zeros(len(val), dtype=bool)
    n = 0
    for e in order:
        if n == n_drop:
            break
        if remaining[pos[e]] <= 1:
            continue
        dropped[e] = True
        remaining[pos[e]] -= 1
        n += 1
    keep = {i: unit[(pos == p) & ~dropped] for p, i in enumerate(layers)}
    return TrimPlan(keep)


def _check_plan(model: ModelGraph, plan: TrimPlan):
    prunable = set(model.prunable_layers())
    for i, k in plan.keep.items():
        if i not in prunable:
            raise ShapeError(f"plan names layer {i}, which is not a prunable layer")
        k = np.asarray(k)
        width = model.layers[i].width
        if len(k) == 0:
            raise ShapeError(f"plan empties layer {i}")
        if k.min() < 0 or k.max() >= width or (len(k) > 1 and (np.diff(k) <= 0).any()):
            raise ShapeError(f"plan for layer {i} is not a strictly increasing subset of range({width})")


def trim(model: ModelGraph, plan: TrimPlan) -> ModelGraph:
    """Return a physically smaller copy keeping the planned units.

    Each weight layer keeps its planned output rows and the input columns its
    predecessor kept. Biases, batch-norm parameters and running statistics follow
    their unit; flatten maps kept channels to their blocks of dense inputs.
    """
    _check_plan(model, plan)
    new = model.clone()
    in_keep = None
    for i, layer in enumerate(new.layers):
        kind = layer.kind
        if layer.is_weight:
            out_keep = np.asarray(plan.keep[i]) if i in plan.keep else None
            W = layer.params["W"].data
            mask = layer.mask
            if in_keep is not None:
                W = W[:, in_keep]
                mask = mask[:, in_keep] if mask is not None else None
            b = layer.params["b"].data
            if out_keep is not None:
                W, b = W[out_keep], b[out_keep]
                mask = mask[out_keep] if mask is not None else None
                layer.kept = layer.kept[out_keep]
                layer.spec = with_units(layer.spec, len(out_keep))
            layer.params["W"] = Tensor(np.ascontiguousarray(W), requires_grad=True)
            layer.params["b"] = Tensor(np.ascontiguousarray(b), requires_grad=True)
            layer.mask = None if mask is None else np.ascontiguousarray(mask)
            in_keep = out_keep
        elif kind == "batchnorm" and in_keep is not None:
            for name in ("gamma", "beta"):
                layer.params[name] = Tensor(layer.params[name].data[in_keep], requires_grad=True)
            st = layer.bn_state
            st.running_mean = st.running_mean[in_keep].copy()
            st.running_var = st.running_var[in_keep].copy()
            layer.kept = layer.kept[in_keep]
        elif kind == "flatten" and in_keep is not None:
            length = layer.in_shape[1]
            in_keep = (in_keep[:, None] * length + np.arange(length)[None, :]).reshape(-1)
    new.refresh_shapes()
    return new


# ---------------------------------------------------------------------------
# masking


@dataclass
class Mask:
    arrays: dict  # weight layer index -> bool array shaped like W

    def count(self):
        return int(sum(int(m.sum()) for m in self.arrays.values()))

    def size(self):
        return int(sum(m.size for m in self.arrays.values()))

    def copy(self):
        return Mask({i: m.copy() for i, m in self.arrays.items()})


def init_mask(model: ModelGraph) -> Mask:
    return Mask({i: np.ones(model.layers[i].params["W"].shape, dtype=bool) for i in model.weight_layers()})


def attach_mask(model: ModelGraph, mask: Mask):
    for i, m in mask.arrays.items():
        if m.shape != model.layers[i].params["W"].shape:
            raise ContractError(f"mask for layer {i} has shape {m.shape}, weights {model.layers[i].params['W'].shape}")
        model.layers[i].mask = m.copy()
    model.apply_masks()
    return model


def _drop_lowest(values, alive, n_keep):
    """Alive positions to drop so ``n_keep`` survive: lowest |value|, higher index first on ties."""
    idx = np.flatnonzero(alive)
    order = np.lexsort((-idx, values[idx]))
    return idx[order[: len(idx) - n_keep]]


def mask_update(model: ModelGraph, mask: Mask, prune_rate=0.3, scope="local") -> Mask:
    """Mask the lowest-|W| fraction ``prune_rate`` of still-unmasked weights."""
    new = mask.copy()
    if scope == "local":
        for i, m in new.arrays.items():
            w = np.abs(model.layers[i].params["W"].data.astype(np.float64)).reshape(-1)
            flat = m.reshape(-1)
            drop = _drop_lowest(w, flat, surviving_count(int(flat.sum()), prune_rate))
            flat[drop] = False
        return new
    if scope != "global":
        raise ValueError(f"unknown scope {scope!r}")
    layers = sorted(new.arrays)
    w = np.concatenate([np.abs(model.layers[i].params["W"].data.astype(np.float64)).reshape(-1) for i in layers])
    alive = np.concatenate([new.arrays[i].reshape(-1) for i in layers])
    drop = _drop_lowest(w, alive, surviving_count(int(alive.sum()), prune_rate))
    alive[drop] = False
    offset = 0
    for i in layers:
        m = new.arrays[i]
        m.reshape(-1)[:] = alive[offset : offset + m.size]
        offset += m.size
    return new


# ---------------------------------------------------------------------------
# rewinding


@dataclass
class RewindSnapshot:
    model: ModelGraph
    epoch: int
    seed: int

    def trimmed(self, plan: TrimPlan) -> "RewindSnapshot":
        return RewindSnapshot(trim(self.model, plan), self.epoch, self.seed)


def rewind(model: ModelGraph, snapshot: RewindSnapshot, plan_or_mask) -> ModelGraph:
    """Reset surviving weights to the snapshot values, in place.

    With a TrimPlan the snapshot is taken to be shaped like the pre-trim model; with
    a Mask the survivors become ``W_k * M``. Running batch-norm statistics reset.
    """
    if isinstance(plan_or_mask, TrimPlan):
        source = trim(snapshot.model, plan_or_mask)
    elif isinstance(plan_or_mask, Mask):
        source = snapshot.model
    else:
        raise TypeError("rewind needs a TrimPlan or a Mask")
    try:
        model.load_state(source.state())
    except ContractError:
        raise ContractError("snapshot topology does not match the model") from None
    if isinstance(plan_or_mask, Mask):
        attach_mask(model, plan_or_mask)
    model.reset_running_stats()
    return model


# ---------------------------------------------------------------------------
# the lottery loop


@dataclass
class RunRecord:
    task: str
    strategy: str
    criterion: str
    scope: str
    seed: int
    iteration: int
    remaining_fraction: float
    params: int
    flops: int
    memory_bytes: int
    disk_bytes: int
    train_err: float
    val_err: float
    test_err: float
    seconds: float


RECORD_FIELDS = tuple(RunRecord.__dataclass_fields__)


def effective_params(model: ModelGraph) -> int:
    """Trainable parameters not frozen at zero by a mask."""
    masked = sum(int((~layer.mask).sum()) for layer in model.layers if layer.mask is not None)
    return count_params(model) - masked


@dataclass
class Reference:
    """Iteration-0 training shared by every strategy of one (task, seed)."""

    model: ModelGraph
    snapshot: RewindSnapshot
    final_lr: float
    seconds: float


def train_reference(task: TaskSpec, dataset: Dataset, lconfig: LotteryConfig, tconfig: TrainConfig,
                    seed: int) -> Reference:
    epochs = tconfig.epochs
    k = int(round(lconfig.rewind_epoch_fraction * epochs))
    start = time.perf_counter()
    model = task.build(seed)
    model, hist = train(model, dataset, replace(tconfig, seed=seed), epochs=epochs, record_at=k)
    snap = RewindSnapshot(hist.snapshot, k, seed)
    return Reference(model, snap, hist.final_lr, time.perf_counter() - start)


@dataclass
class RunState:
    """Everything needed to continue a repetition after ``iteration``."""

    iteration: int
    model: ModelGraph
    snapshot: RewindSnapshot
    final_lr: float


def lottery_repetition(task: TaskSpec, dataset: Dataset, lconfig: LotteryConfig, tconfig: TrainConfig,
                       seed: int, reference: Reference | None = None, on_record=None, on_state=None,
                       resume: RunState | None = None, timing=True):
    """One seeded run of the lottery loop; returns (records, events).

    Row 0 is the fully trained reference. Each later row is one
    rank -> prune -> rewind (or not) -> retrain cycle. ``on_state`` receives a
    RunState after every row; passing one back as ``resume`` continues the run
    with identical results.
    """
    records, events = [], []

    def emit(it, mdl, seconds, event):
        cost = cost_report(mdl)
        rec = RunRecord(
            task=task.name, strategy=lconfig.strategy, criterion=lconfig.criterion, scope=lconfig.scope,
            seed=seed, iteration=it, remaining_fraction=effective_params(mdl) / ref_params,
            params=cost.param_count, flops=cost.flops, memory_bytes=cost.memory, disk_bytes=cost.disk_size,
            train_err=evaluate(mdl, dataset.train), val_err=evaluate(mdl, dataset.val),
            test_err=evaluate(mdl, dataset.test), seconds=round(seconds, 3) if timing else 0.0,
        )
        event = dict(event, iteration=it, seed=seed, strategy=lconfig.strategy)
        records.append(rec)
        events.append(event)
        if on_record is not None:
            on_record(rec, event)

    if resume is None:
        if reference is None:
            reference = train_reference(task, dataset, lconfig, tconfig, seed)
        model = reference.model.clone()
        snapshot = RewindSnapshot(reference.snapshot.model.clone(), reference.snapshot.epoch, seed)
        final_lr = reference.final_lr
        first = 1
        ref_params = count_params(model)
        emit(0, model, reference.seconds, {"rewound": False, "widths": _widths(model)})
        if on_state is not None:
            on_state(RunState(0, model, snapshot, final_lr))
    else:
        model, snapshot, final_lr = resume.model, resume.snapshot, resume.final_lr
        first = resume.iteration + 1
        ref_params = count_params(task.build(seed))
    retrain_epochs = tconfig.epochs - snapshot.epoch
    mask = None
    if lconfig.strategy == "mask":
        mask = Mask(model.masks()) if model.masks() else init_mask(model)

    for it in range(first, lconfig.iterations + 1):
        start = time.perf_counter()
        if lconfig.strategy == "mask":
            # masking ranks individual weights by magnitude whatever the unit criterion
            mask = mask_update(model, mask, lconfig.prune_rate, lconfig.scope)
            new = rewind(model.clone(), snapshot, mask)
            lr = tconfig.learning_rate
        else:
            scores = compute_scores(model, lconfig.criterion, dataset.val.inputs)
            plan = rank_units(scores, lconfig.scope, lconfig.prune_rate)
            new = trim(model, plan)
            if lconfig.strategy == "trim":
                rewind(new, snapshot, plan)
                snapshot = snapshot.trimmed(plan)
                lr = tconfig.learning_rate
            else:
                # classical fine-tuning continues from the trained weights at the last learning rate
                lr = final_lr
        cfg = replace(tconfig, seed=seed * 1000 + it)
        try:
            new, hist = train(new, dataset, cfg, epochs=retrain_epochs, lr=lr)
        except Exception as exc:
            raise RuntimeError(f"iteration {it}: {exc}") from exc
        final_lr = hist.final_lr
        model = new
        emit(it, model, time.perf_counter() - start,
             {"rewound": lconfig.strategy != "finetune", "widths": _widths(model)})
        if on_state is not None:
            on_state(RunState(it, model, snapshot, final_lr))
    return records, events


def _widths(model):
    return [model.layers[i].width for i in model.prunable_layers()]


def lottery_run(task: TaskSpec, dataset: Dataset, lconfig: LotteryConfig, tconfig: TrainConfig,
                base_seed: int = 0, on_record=None, timing=True):
    """All repetitions (seeds base_seed, base_seed+1, ...) of the lottery loop."""
    records = []
    for r in range(lconfig.repetitions):
        recs, _ = lottery_repetition(task, dataset, lconfig, tconfig, base_seed + r,
                                     on_record=on_record, timing=timing)
        records.extend(recs)
    return records

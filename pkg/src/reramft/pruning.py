"""Unstructured magnitude pruning and the hierarchical progressive pruning search."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .faults import FaultModel
from .mapping import MappingScheme


def prune_ratio(model):
    """Fraction of exactly-zero weights over all weighted layers."""
    idx = model.prunable()
    total = sum(model.layers[i].weights.size for i in idx)
    if total == 0:
        raise ValueError("model has no weights")
    zeros = sum(int(np.count_nonzero(model.layers[i].weights == 0)) for i in idx)
    return zeros / total


def mismatch_expectation(p_off, p_on, R_p=0.0):
    """Expected fraction of weights whose mapped value differs from the trained one.

    Single-cell setting: stuck-off faults landing on zero weights are
    harmless, so only the nonzero fraction ``1 - R_p`` is exposed to them.
    ``R_p = 0`` gives the plain ``p_off + p_on``.
    """
    if p_off < 0 or p_on < 0 or p_off + p_on > 1:
        raise ValueError(f"invalid fault probabilities p_off={p_off}, p_on={p_on}")
    if not 0.0 <= R_p <= 1.0:
        raise ValueError(f"pruning ratio {R_p} outside [0, 1]")
    return p_off * (1.0 - R_p) + p_on


def magnitude_prune(model, block, ratio):
    """Zero the ``floor(ratio * N)`` smallest-magnitude weights pooled across ``block``.

    Ties at the threshold go to the lowest flat index (layers in ascending
    index order, each row-major). Returns a new model; the prune masks of
    the block's layers are updated.
    """
    block = sorted(set(block))
    if not block:
        raise ValueError("empty block")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"pruning ratio {ratio} outside [0, 1]")
    out = model.copy()
    layers = [out.layers[i] for i in block]
    if any(layer.weights is None for layer in layers):
        raise ValueError("block contains layers without weights")
    mags = np.concatenate([np.abs(layer.weights).ravel() for layer in layers])
    n = mags.size
    k = min(n, int(math.floor(ratio * n + 1e-9)))
    keep = np.ones(n, bool)
    keep[np.argsort(mags, kind="stable")[:k]] = False
    pos = 0
    for layer in layers:
        m = keep[pos:pos + layer.weights.size].reshape(layer.weights.shape)
        pos += layer.weights.size
        if layer.mask is not None:
            m = m & layer.mask.astype(bool)
        layer.weights = np.where(m, layer.weights, 0).astype(layer.weights.dtype)
        layer.mask = m.astype(np.uint8)
    return out


@dataclass(frozen=True)
class BlockPartition:
    blocks: tuple  # tuple of tuples of layer indices, ascending parameter count

    def params(self, model, block):
        return sum(model.layers[i].weights.size for i in block)


def partition_blocks(model, size_classes=None):
    """Group weighted layers into blocks and order them by parameter count.

    By default layers sharing an output width (features or channels) form
    one block. ``size_classes`` may instead give explicit groups of layer
    indices.
    """
    idx = model.prunable()
    if not idx:
        raise ValueError("model has no prunable layers")
    if size_classes is None:
        groups = {}
        for i in idx:
            groups.setdefault(model.layers[i].out_features, []).append(i)
        blocks = [tuple(g) for g in groups.values()]
    else:
        blocks = [tuple(sorted(g)) for g in size_classes]
        flat = [i for b in blocks for i in b]
        if sorted(flat) != idx:
            raise ValueError("size classes must partition the prunable layers exactly")
    blocks.sort(key=lambda b: (sum(model.layers[i].weights.size for i in b), b))
    return BlockPartition(tuple(blocks))


@dataclass
class PruneSearchConfig:
    th: float = 0.005  # accuracy units of the evaluator (0.005 == 0.5 points)
    ratios: list = field(default_factory=lambda: [round(0.1 * i, 10) for i in range(1, 10)])
    trials: int = 100
    fault_model: FaultModel = field(default_factory=lambda: FaultModel.from_rate(0.01))
    scheme: MappingScheme = MappingScheme.DIFFERENTIAL
    dataset: nn.Dataset | None = None
    seed: int = 0
    finetune_epochs: int = 0
    finetune_data: nn.Dataset | None = None
    finetune_lr: float = 0.02
    finetune_momentum: float = 0.9
    jobs: int = 1

    def __post_init__(self):
        if self.th <= 0:
            raise ValueError("th must be positive")
        if any(b <= a for a, b in zip(self.ratios, self.ratios[1:])):
            raise ValueError("ratios must be strictly ascending")
        if any(not 0 <= r < 1 for r in self.ratios):
            raise ValueError("ratios must lie in [0, 1)")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class SearchRound:
    ratio: float
    active_blocks: list
    acc_mean: float
    acc_std: float
    accepted: bool
    reference_acc: float
    model_prune_ratio: float
    popped: list | None = None

    def to_record(self):
        return {
            "ratio": self.ratio,
            "active_blocks": [list(b) for b in self.active_blocks],
            "acc_mean": self.acc_mean,
            "acc_std": self.acc_std,
            "reference_acc": self.reference_acc,
            "decision": "accept" if self.accepted else "reject",
            "popped": self.popped,
            "model_prune_ratio": self.model_prune_ratio,
        }


@dataclass
class SearchTrace:
    baseline_mean: float | None = None
    baseline_std: float | None = None
    rounds: list = field(default_factory=list)
    best_round: int | None = None  # None -> the input model was returned

    def __len__(self):
        return len(self.rounds)

    def records(self):
        yield {"event": "baseline", "acc_mean": self.baseline_mean, "acc_std": self.baseline_std}
        for i, r in enumerate(self.rounds):
            yield {"event": "round", "round": i, **r.to_record()}
        yield {"event": "result", "best_round": self.best_round}


def fault_evaluator(cfg):
    """Mean/std faulted accuracy over ``cfg.trials`` Monte-Carlo trials."""
    from .harness.experiment import evaluate_with_faults

    if cfg.dataset is None:
        raise ValueError("search config needs an evaluation dataset")

    def evaluate(model):
        stats = evaluate_with_faults(model, cfg.scheme, cfg.fault_model, cfg.dataset,
                                     cfg.trials, cfg.seed, jobs=cfg.jobs)
        return stats.acc_mean, stats.acc_std

    return evaluate


def _prune_active(model, blocks, ratio, cfg):
    for b in blocks:
        model = magnitude_prune(model, b, ratio)
    if cfg.finetune_epochs > 0:
        if cfg.finetune_data is None:
            raise ValueError("fine-tuning needs a training dataset")
        model = nn.train_sgd(model, cfg.finetune_data, cfg.finetune_epochs, cfg.finetune_lr,
                             cfg.finetune_momentum, seed=cfg.seed, respect_mask=True)
    return model


def hierarchical_progressive_prune(model, partition, cfg, evaluate=None, on_round=None):
    """Raise the pruning ratio while shrinking the set of pruned blocks.

    Each round prunes every active block of the current model to the
    candidate ratio and scores it with ``evaluate`` (``model -> (mean,
    std)``, faulted accuracy by default). A candidate within ``cfg.th`` of
    the current model's accuracy is accepted and the search moves to the
    next ratio. Otherwise the smallest active block is dropped and the same
    ratio is tried again. Returns the best accepted model (the input model
    if nothing was accepted) and the full trace.
    """
    trace = SearchTrace()
    if not cfg.ratios:
        return model, trace
    evaluate = evaluate or fault_evaluator(cfg)
    cur_acc, cur_std = evaluate(model)
    trace.baseline_mean, trace.baseline_std = cur_acc, cur_std
    current, best, best_acc = model, model, None
    active = list(partition.blocks)
    i = 0
    while i < len(cfg.ratios) and active:
        p = cfg.ratios[i]
        cand = _prune_active(current, active, p, cfg)
        acc, std = evaluate(cand)
        accepted = cur_acc - acc < cfg.th
        rnd = SearchRound(p, list(active), acc, std, accepted, cur_acc, prune_ratio(cand))
        if accepted:
            if best_acc is None or acc > best_acc:
                best, best_acc = cand, acc
                trace.best_round = len(trace.rounds)
            current, cur_acc = cand, acc
            i += 1
        else:
            rnd.popped = list(active.pop(0))
        trace.rounds.append(rnd)
        if on_round is not None:
            on_round(rnd)
    return best, trace

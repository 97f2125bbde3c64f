"""Adam, the full-batch co-training loop with early stopping, and F1 metrics."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .graph import NodeData
from .layers import DropoutStream
from .model import CoBFormer, ModelConfig, collaborative_loss, cross_entropy, soft_labels
from .partition import Partition

LR_GRID = (5e-4, 1e-3, 5e-3, 1e-2, 5e-2)
WD_GCN_GRID = (1e-4, 5e-4, 1e-3, 5e-3, 1e-2)
WD_BGA_GRID = (1e-5, 5e-5, 1e-4, 5e-4, 1e-3)
ALPHA_GRID = (0.9, 0.8, 0.7)
TAU_GRID = (0.9, 0.7, 0.5, 0.3)
CORA_PARTS_GRID = (80, 96, 112, 144)


class TrainingFault(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    weight_decay_gcn: float = 5e-4
    weight_decay_bga: float = 1e-5
    max_epochs: int = 1000
    patience: int = 100
    seed: int = 0
    num_parts: int = 112
    epsilon: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.weight_decay_gcn < 0 or self.weight_decay_bga < 0:
            raise ValueError("weight decay must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_g: float
    val_t: float | None
    test_mi_g: float
    test_ma_g: float
    test_mi_t: float | None
    test_ma_t: float | None

    @property
    def val_score(self) -> float:
        if self.val_t is None:
            return self.val_g
        return 0.5 * (self.val_g + self.val_t)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    """One decoupled-weight-decay Adam step, in place on ``params[i].values``.

    The decay term uses the pre-step value: theta -= lr*wd*theta_old and the
    bias-corrected Adam update are both computed before either is applied.
    """
    state.t += 1
    t = state.t
    for p, g in zip(params, grads):
        key = p.name or id(p)
        g = np.zeros_like(p.values) if g is None else g
        m = state.m.get(key, 0.0)
        v = state.v.get(key, 0.0)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[key], state.v[key] = m, v
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        step = lr * mhat / (np.sqrt(vhat) + eps) + lr * weight_decay * p.values
        p.values -= step


def micro_macro_f1(pred, labels, mask):
    """(Micro-F1, Macro-F1) over masked nodes.

    Macro averages per-class F1 over the classes present among the masked
    labels; a class that only shows up in predictions is skipped.
    """
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask
    if len(idx) == 0:
        raise ad.ContractError("empty evaluation mask")
    p = np.asarray(pred)[idx]
    y = np.asarray(labels)[idx]
    micro = float(np.mean(p == y))
    f1s = []
    for c in np.unique(y):
        tp = np.sum((p == c) & (y == c))
        fp = np.sum((p == c) & (y != c))
        fn = np.sum((p != c) & (y == c))
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return micro, float(np.mean(f1s))


@dataclass
class TrainResult:
    history: list
    best_state: dict
    best_epoch: int | None
    best_record: EpochRecord | None
    model: CoBFormer

    def summary(self, model_config=None, train_config=None):
        out = {"best_epoch": self.best_epoch, "epochs_run": len(self.history)}
        out["best"] = None if self.best_record is None else asdict(self.best_record)
        if model_config is not None:
            out["model_config"] = model_config.to_dict()
        if train_config is not None:
            out["train_config"] = train_config.to_dict()
        return out


def evaluate(model, data: NodeData, adj_norm, partition, epoch, loss):
    out = model.forward(data.features, adj_norm, partition)
    pg = np.argmax(out.logits_g.values, axis=1)
    val_g, _ = micro_macro_f1(pg, data.labels, data.val_mask)
    mi_g, ma_g = micro_macro_f1(pg, data.labels, data.test_mask)
    val_t = mi_t = ma_t = None
    if out.logits_t is not None:
        pt = np.argmax(out.logits_t.values, axis=1)
        val_t, _ = micro_macro_f1(pt, data.labels, data.val_mask)
        mi_t, ma_t = micro_macro_f1(pt, data.labels, data.test_mask)
    return EpochRecord(epoch, loss, val_g, val_t, mi_g, ma_g, mi_t, ma_t)


def model_loss(model, out, data: NodeData, parts=None):
    cfg = model.config
    if out.logits_t is None:
        yg = ad.row_softmax(out.logits_g)
        return cross_entropy(yg, data.labels, np.flatnonzero(data.train_mask), model.num_classes)
    yg, yt = ad.row_softmax(out.logits_g), ad.row_softmax(out.logits_t)
    sg, st = soft_labels(out.logits_g, cfg.tau), soft_labels(out.logits_t, cfg.tau)
    return collaborative_loss(yg, yt, sg, st, data.labels, data.train_mask, cfg.alpha, parts=parts)


def train_loop(model: CoBFormer, data: NodeData, adj_norm, partition: Partition | None, config: TrainConfig,
               metrics_stream=None):
    """Full-batch training; returns a :class:`TrainResult`.

    Each epoch runs one training forward (dropout keyed by seed and epoch),
    one backward, one Adam step per parameter group, then an eval forward.
    Early stopping watches the mean of the two heads' validation Micro-F1;
    ties keep the earlier epoch.
    """
    if partition is not None and partition.num_nodes != data.num_nodes:
        raise ValueError("partition does not match the graph")
    if not data.train_mask.any():
        raise ValueError("empty train mask")
    groups = model.param_groups()
    decay = {"gcn": config.weight_decay_gcn, "bga": config.weight_decay_bga}
    states = {name: AdamState() for name in groups}
    history = []
    best_state = model.state_dict()
    best_epoch, best_record, best_score = None, None, -np.inf
    since_best = 0
    for epoch in range(config.max_epochs):
        for group in groups.values():
            for p in group:
                p.zero_grad()
        try:
            with ad.Tape() as tape:
                out = model.forward(data.features, adj_norm, partition, drop=DropoutStream(config.seed, epoch))
                loss = model_loss(model, out, data)
            tape.backward(loss)
        except ad.NumericalFault as exc:
            raise TrainingFault(f"epoch {epoch}: {exc}") from exc
        for name, group in groups.items():
            if group:
                adam_step(group, [p.grad for p in group], states[name], config.learning_rate, decay[name])
        rec = evaluate(model, data, adj_norm, partition, epoch, loss.item())
        history.append(rec)
        if metrics_stream is not None:
            metrics_stream.write(rec.to_json() + "\n")
        if rec.val_score > best_score:
            best_score, best_epoch, best_record = rec.val_score, epoch, rec
            best_state = model.state_dict()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    return TrainResult(history, best_state, best_epoch, best_record, model)


def build_and_train(data, adj_norm, partition, model_config: ModelConfig, train_config: TrainConfig,
                    metrics_stream=None):
    model = CoBFormer(model_config, data.features.shape[1], data.num_classes, seed=train_config.seed)
    return train_loop(model, data, adj_norm, partition, train_config, metrics_stream)


def grid_configs(model_config: ModelConfig, train_config: TrainConfig, alphas=ALPHA_GRID, taus=TAU_GRID, **axes):
    """Cartesian product over alpha, tau and any TrainConfig/ModelConfig field in ``axes``."""
    names = ["alpha", "tau", *axes]
    values = [alphas, taus, *axes.values()]
    model_fields = set(ModelConfig.__dataclass_fields__)
    for combo in itertools.product(*values):
        mc, tc = model_config, train_config
        for k, v in zip(names, combo):
            if k in model_fields:
                mc = replace(mc, **{k: v})
            else:
                tc = replace(tc, **{k: v})
        yield mc, tc


def run_grid(data, adj_norm, partition_for, model_config, train_config, seeds=(0,), **grid):
    """Train every grid point on every seed; best point by mean best-epoch val score.

    ``partition_for(num_parts)`` supplies (and may cache) partitions.
    Returns ``(best_point, results)`` with results a list of
    ``(model_config, train_config, [TrainResult per seed])``.
    """
    results = []
    for mc, tc in grid_configs(model_config, train_config, **grid):
        runs = []
        for s in seeds:
            tcs = replace(tc, seed=s)
            part = partition_for(tcs.num_parts) if mc.branches == "both" and mc.attention == "bga" else None
            runs.append(build_and_train(data, adj_norm, part, mc, tcs))
        results.append((mc, tc, runs))

    def score(entry):
        return np.mean([r.best_record.val_score if r.best_record else -np.inf for r in entry[2]])

    best = max(results, key=score) if results else None
    return best, results

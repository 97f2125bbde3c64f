"""CoBFormer: bi-level global attention branch, GCN branch and the co-training loss."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    EVAL,
    AttentionBlock,
    FfnBlock,
    GcnLayer,
    Linear,
    attention_forward,
    ffn_forward,
    gcn_forward,
)
from .partition import Partition

LOG_FLOOR = 1e-12


@dataclass
class ModelConfig:
    hidden: int = 64
    gcn_hidden: int | None = None
    num_bga_layers: int = 1
    num_heads: int = 1
    dropout_gcn: float = 0.5
    dropout_bga: float = 0.1
    gcn_layers: int = 2
    alpha: float = 0.8
    tau: float = 0.5
    attention: str = "bga"  # "bga" | "vanilla"
    branches: str = "both"  # "both" | "gcn"

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.gcn_layers < 1:
            raise ValueError("gcn_layers must be >= 1")
        if self.attention not in ("bga", "vanilla"):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if self.branches not in ("both", "gcn"):
            raise ValueError(f"unknown branches {self.branches!r}")

    @property
    def gcn_width(self):
        return self.gcn_hidden or self.hidden

    def to_dict(self):
        return asdict(self)


@dataclass
class BgaCapture:
    """Head-averaged attention snapshots of one BGA layer."""

    layer: int
    intra: list  # per cluster |V_p| x |V_p| (a single N x N block in vanilla mode)
    intra_logits: list
    inter: np.ndarray  # P x P
    members: list = field(default_factory=list)


@dataclass
class ModelOutput:
    logits_g: Tensor | None
    logits_t: Tensor | None
    gcn_out: Tensor | None
    bga_out: Tensor | None
    captures: list
    score_entries: list  # one instrumented count per BGA layer


class BgaLayer:
    def __init__(self, rng, hidden, num_heads, name):
        self.intra_attn = AttentionBlock(rng, hidden, num_heads, f"{name}.intra.attn")
        self.intra_ffn = FfnBlock(rng, hidden, f"{name}.intra.ffn")
        self.inter_attn = AttentionBlock(rng, hidden, num_heads, f"{name}.inter.attn")
        self.inter_ffn = FfnBlock(rng, hidden, f"{name}.inter.ffn")
        self.fusion = Linear(rng, 2 * hidden, hidden, f"{name}.fusion", bias=False)

    def parameters(self):
        return [
            *self.intra_attn.parameters(),
            *self.intra_ffn.parameters(),
            *self.inter_attn.parameters(),
            *self.inter_ffn.parameters(),
            *self.fusion.parameters(),
        ]


class CoBFormer:
    """All trainable weights plus the forward pass of both branches.

    Parameters live in two groups, ``"gcn"`` (GCN layers and Lin-G) and
    ``"bga"`` (embedding, BGA layers and Lin-T), so each can get its own
    weight decay.
    """

    def __init__(self, config: ModelConfig, num_features: int, num_classes: int, seed: int = 0):
        self.config = config
        self.num_features = num_features
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        h, hg = config.hidden, config.gcn_width

        widths = [num_features] + [hg] * config.gcn_layers
        self.gcn = [GcnLayer(rng, widths[i], widths[i + 1], f"gcn{i}") for i in range(config.gcn_layers)]
        self.lin_g = Linear(rng, hg, num_classes, "lin_g")
        if config.branches == "both":
            self.embed = Linear(rng, num_features, h, "embed")
            self.bga = [BgaLayer(rng, h, config.num_heads, f"bga{k}") for k in range(config.num_bga_layers)]
            self.lin_t = Linear(rng, h, num_classes, "lin_t")
        else:
            self.embed, self.bga, self.lin_t = None, [], None

    def param_groups(self):
        gcn = [p for layer in self.gcn for p in layer.parameters()] + self.lin_g.parameters()
        bga = []
        if self.embed is not None:
            bga = self.embed.parameters() + [p for layer in self.bga for p in layer.parameters()]
            bga += self.lin_t.parameters()
        return {"gcn": gcn, "bga": bga}

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for group in self.param_groups().values():
            for p in group:
                out[p.name] = p
        return out

    def state_dict(self):
        return OrderedDict((k, v.values.copy()) for k, v in self.parameters().items())

    def load_state_dict(self, state):
        params = self.parameters()
        missing = set(params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on {sorted(missing)[:5]}")
        for k, p in params.items():
            v = np.asarray(state[k], dtype=p.values.dtype)
            if v.shape != p.shape:
                raise ad.ShapeError(f"{k}: {v.shape} != {p.shape}")
            p.values[...] = v

    def forward(self, features, adj_norm, partition: Partition | None, drop=EVAL, capture=False):
        cfg = self.config
        x = features if isinstance(features, Tensor) else Tensor(features)
        h = x
        for i, layer in enumerate(self.gcn):
            h = gcn_forward(layer, adj_norm, h, activation=i < len(self.gcn) - 1, drop=drop, p=cfg.dropout_gcn)
        gcn_out = h
        logits_g = self.lin_g(gcn_out)
        if cfg.branches == "gcn":
            return ModelOutput(logits_g, None, gcn_out, None, [], [])
        if cfg.attention == "vanilla":
            bga_out, caps, counts = vanilla_forward(self, x, drop=drop, capture=capture)
        else:
            bga_out, caps, counts = bga_forward(self, x, partition, drop=drop, capture=capture)
        logits_t = self.lin_t(bga_out)
        return ModelOutput(logits_g, logits_t, gcn_out, bga_out, caps, counts)


def _embed(model, x, drop):
    return drop(ad.relu(model.embed(x)), model.config.dropout_bga)


def _inter_and_fuse(layer, hhat, assignment, num_parts, drop, p, capture):
    tokens = ad.mean_rows(hhat, assignment, num_parts)
    inter, inter_cap = attention_forward(layer.inter_attn, tokens, tokens, capture, drop, p)
    phat = ffn_forward(layer.inter_ffn, inter, drop, p)
    fused = layer.fusion(ad.concat_cols([hhat, ad.row_select(phat, assignment)]))
    return fused, inter_cap


def bga_forward(model: CoBFormer, x, partition: Partition, drop=EVAL, capture=False):
    """Bi-level attention over ``partition``; returns ``(H, captures, counts)``.

    Intra-cluster attention runs block by block, cluster tokens are the mean
    of each block's post-FFN rows, inter-cluster attention runs over the P
    tokens, and each node's row is ``concat(node, its cluster token) @ W_f``.
    ``counts[k]`` is the number of score entries layer k materialized.
    """
    if partition is None:
        raise ValueError("BGA mode needs a partition")
    n = x.shape[0]
    if partition.num_nodes != n:
        raise ValueError(f"partition covers {partition.num_nodes} nodes, input has {n}")
    members = partition.members
    if any(len(m) == 0 for m in members):
        raise ad.ContractError("empty cluster in partition")
    order = np.concatenate(members)
    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = np.arange(n)
    p = model.config.dropout_bga

    h = _embed(model, x, drop)
    caps, counts = [], []
    for k, layer in enumerate(model.bga):
        blocks, intra_scores, intra_logits = [], [], []
        entries = 0
        for idx in members:
            hp = ad.row_select(h, idx)
            out, cap = attention_forward(layer.intra_attn, hp, hp, capture, drop, p)
            entries += len(idx) * len(idx)
            blocks.append(out)
            if capture:
                intra_scores.append(cap.scores)
                intra_logits.append(cap.logits)
        stacked = blocks[0] if len(blocks) == 1 else ad.concat_rows(blocks)
        hhat = ffn_forward(layer.intra_ffn, ad.row_select(stacked, inverse), drop, p)
        h, inter_cap = _inter_and_fuse(layer, hhat, partition.assignment, partition.num_parts, drop, p, capture)
        entries += partition.num_parts**2
        counts.append(entries)
        if capture:
            caps.append(BgaCapture(k, intra_scores, intra_logits, inter_cap.scores, list(members)))
    return h, caps, counts


def vanilla_forward(model: CoBFormer, x, drop=EVAL, capture=False):
    """Full N x N attention in place of the intra stage; one global token after it."""
    n = x.shape[0]
    p = model.config.dropout_bga
    h = _embed(model, x, drop)
    single = np.zeros(n, dtype=np.int64)
    caps, counts = [], []
    for k, layer in enumerate(model.bga):
        out, cap = attention_forward(layer.intra_attn, h, h, capture, drop, p)
        hhat = ffn_forward(layer.intra_ffn, out, drop, p)
        h, inter_cap = _inter_and_fuse(layer, hhat, single, 1, drop, p, capture)
        counts.append(n * n + 1)
        if capture:
            caps.append(BgaCapture(k, [cap.scores], [cap.logits], inter_cap.scores, [np.arange(n)]))
    return h, caps, counts


def predict_heads(model: CoBFormer, gcn_out, bga_out):
    """Logits of Lin-G and Lin-T."""
    return model.lin_g(gcn_out), model.lin_t(bga_out)


def soft_labels(logits, tau):
    """row_softmax(logits * tau); tau < 1 flattens toward uniform."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    return ad.row_softmax(ad.scale(logits, tau))


def _expected_log(targets, probs, rows):
    """mean over ``rows`` of sum_c targets * log(probs)."""
    t = ad.row_select(targets, rows)
    lp = ad.log(ad.row_select(probs, rows), floor=LOG_FLOOR)
    return ad.scale(ad.sum_all(ad.mul(t, lp)), 1.0 / len(rows))


def cross_entropy(probs, labels, rows, num_classes):
    onehot = np.zeros((probs.shape[0], num_classes))
    onehot[rows, np.asarray(labels)[rows]] = 1.0
    return ad.scale(_expected_log(onehot, probs, rows), -1.0)


def collaborative_loss(y_g, y_t, s_g, s_t, labels, train_mask, alpha, parts=None, fixed_targets=None):
    """alpha * L_ce + (1 - alpha) * L_co.

    Each L_co term treats the other branch's soft labels as a fixed target.
    ``fixed_targets=(t_g, t_t)`` substitutes stored arrays for those targets,
    which lets a finite-difference check hold them still while parameters move.
    ``parts``, when a dict, receives the float values of ``ce`` and ``co``.
    """
    train = np.flatnonzero(train_mask)
    if len(train) == 0:
        raise ValueError("empty train mask")
    num_classes = y_g.shape[1]
    ce = ad.add(cross_entropy(y_g, labels, train, num_classes), cross_entropy(y_t, labels, train, num_classes))
    if parts is not None:
        parts["ce"] = ce.item()
    unlabeled = np.flatnonzero(~np.asarray(train_mask))
    if alpha == 1.0 or len(unlabeled) == 0:
        if parts is not None:
            parts["co"] = 0.0 if len(unlabeled) == 0 else co_loss_value(s_g, s_t, unlabeled)
        return ad.scale(ce, alpha) if alpha != 1.0 else ce
    if fixed_targets is None:
        t_g, t_t = ad.detach(s_g), ad.detach(s_t)
    else:
        t_g, t_t = (Tensor(np.asarray(t.values if isinstance(t, Tensor) else t)) for t in fixed_targets)
    co = ad.scale(
        ad.add(
            _expected_log(t_g, s_t, unlabeled),
            _expected_log(t_t, s_g, unlabeled),
        ),
        -1.0,
    )
    if parts is not None:
        parts["co"] = co.item()
    return ad.add(ad.scale(ce, alpha), ad.scale(co, 1.0 - alpha))


def co_loss_value(s_g, s_t, rows) -> float:
    """L_co as a plain float (no tape)."""
    sg = np.asarray(s_g.values if isinstance(s_g, Tensor) else s_g)[rows]
    st = np.asarray(s_t.values if isinstance(s_t, Tensor) else s_t)[rows]
    lg = np.log(np.maximum(sg, LOG_FLOOR))
    lt = np.log(np.maximum(st, LOG_FLOOR))
    return float(-((sg * lt).sum(axis=1).mean() + (st * lg).sum(axis=1).mean()))


def approx_global_attention(partition: Partition, inter_scores, p, q) -> float:
    """Node-level score implied by cluster attention: inter[p, q] / |V_q|."""
    return float(inter_scores[p, q] / len(partition.members[q]))


def expand_inter_scores(partition: Partition, inter_scores) -> np.ndarray:
    """N x N matrix of approx_global_attention for every node pair."""
    a = partition.assignment
    sizes = partition.sizes.astype(float)
    return np.asarray(inter_scores)[a][:, a] / sizes[a][None, :]


def pooled_identity_gap(partition: Partition, inter_scores, h, w_value) -> float:
    """Max |pooled - expanded| over every (cluster p, cluster q) pair.

    Pooled: inter[p, q] * mean_{v in V_q}(h_v) @ W. Expanded:
    sum_{v in V_q} (inter[p, q] / |V_q|) * h_v @ W.
    """
    h = np.asarray(h)
    w = np.asarray(w_value)
    worst = 0.0
    for q, mem in enumerate(partition.members):
        pooled_vq = h[mem].mean(axis=0) @ w
        for pi in range(partition.num_parts):
            a = inter_scores[pi, q]
            lhs = a * pooled_vq
            rhs = np.zeros_like(lhs)
            for v in mem:
                rhs += approx_global_attention(partition, inter_scores, pi, q) * (h[v] @ w)
            worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst

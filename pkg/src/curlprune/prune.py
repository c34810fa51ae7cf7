"""Coupled channel groups, importance criteria, removal plans and network surgery."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .accounting import macs_for_widths
from .nn import NetworkGraph
from .tensor import Parameter, Tensor

logger = logging.getLogger(__name__)

CRITERIA = ("random", "weight_sum", "delta_loss", "kl")
Q_CLAMP = 1e-12
PROXY_CHUNK = 128


class CouplingError(ValueError):
    pass


class PlanMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelSlot:
    layer_id: str  # producing conv
    channel_index: int
    role: str  # "block_output" | "inner_channel"


@dataclass(frozen=True)
class PruneGroup:
    group_id: int
    slots: tuple
    stage_id: int | None
    space: str
    channel: int

    @property
    def role(self):
        return self.slots[0].role


@dataclass(frozen=True)
class ImportanceScore:
    group_id: int
    score: float


@dataclass
class ProxySet:
    images: np.ndarray
    reference_probs: np.ndarray
    indices: np.ndarray
    labels: np.ndarray | None = None

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.indices, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.images).tobytes())
        return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# groups


def discover_groups(net: NetworkGraph) -> list[PruneGroup]:
    """One group per channel of every prunable space, with one slot per producer."""
    groups = []
    for space in net.channel_spaces():
        if not space.prunable:
            continue
        if not space.producers:
            raise CouplingError(f"channel space {space.name} has no producing conv")
        producers = [net.layer(p) for p in space.producers]
        widths = {p.out_channels for p in producers}
        if widths != {space.width}:
            raise CouplingError(f"channel space {space.name}: producers disagree on width {sorted(widths)}")
        for c in range(space.width):
            slots = tuple(ChannelSlot(p, c, space.role) for p in space.producers)
            groups.append(PruneGroup(len(groups), slots, space.stage_id, space.name, c))
    return groups


def _zero_targets(net: NetworkGraph, slot: ChannelSlot) -> list:
    bn = net.bn_after(slot.layer_id)
    if bn is not None:
        return [bn.gamma.data, bn.beta.data]
    conv = net.layer(slot.layer_id)
    return [conv.weight.data] + ([conv.bias.data] if conv.bias is not None else [])


@contextlib.contextmanager
def zeroed(net: NetworkGraph, group: PruneGroup):
    """Temporarily silence every slot of ``group``; parameters are restored bitwise on exit."""
    saved = []
    for slot in group.slots:
        for arr in _zero_targets(net, slot):
            saved.append((arr, slot.channel_index, arr[slot.channel_index].copy()))
    for arr, c, _ in saved:
        arr[c] = 0
    try:
        yield net
    finally:
        for arr, c, old in saved:
            arr[c] = old
        # re-resolve through the graph so a swapped-out buffer is caught too
        live = [(arr, slot.channel_index) for slot in group.slots for arr in _zero_targets(net, slot)]
        if len(live) != len(saved) or any(a[c].tobytes() != old.tobytes() for (a, c), (_, _, old) in zip(live, saved)):
            raise AssertionError(f"group {group.group_id}: parameters not restored after zeroing")


def zero_groups(net: NetworkGraph, groups) -> NetworkGraph:
    """Permanently zero ``groups`` on a clone (the masking reference for surgery)."""
    out = net.clone()
    for g in groups:
        for slot in g.slots:
            for arr in _zero_targets(out, slot):
                arr[slot.channel_index] = 0
    return out


# --------------------------------------------------------------------------
# proxy and cached forward


def _eval_logits(net: NetworkGraph, images: np.ndarray) -> np.ndarray:
    chunks = []
    with T.no_grad():
        for i in range(0, len(images), PROXY_CHUNK):
            x = Tensor(images[i:i + PROXY_CHUNK], dtype=net.fc.weight.dtype)
            chunks.append(net.forward(x, training=False).data)
    return np.concatenate(chunks).astype(np.float64)


def softmax64(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def make_proxy(net: NetworkGraph, images, indices, labels=None) -> ProxySet:
    """Reference softmax (temperature 1) of the unpruned net on a fixed image sample."""
    images = np.ascontiguousarray(images, dtype=net.fc.weight.dtype)
    probs = softmax64(_eval_logits(net, images))
    return ProxySet(images, probs, np.asarray(indices), None if labels is None else np.asarray(labels))


def kl_divergence(p, q) -> np.ndarray:
    """Per-row D_KL(p || q) with q clamped at 1e-12; terms with p = 0 contribute 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((q < Q_CLAMP) & (p > 0)):
        logger.debug("kl_divergence: clamped q below %g", Q_CLAMP)
    qc = np.maximum(q, Q_CLAMP)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(qc)), 0.0)
    return terms.sum(axis=-1)


class _StageCache:
    """Inputs of every block on the proxy images, so a zeroed group is re-run
    only from the first block it can affect."""

    def __init__(self, net: NetworkGraph, images: np.ndarray):
        self.net = net
        self.position = {}
        for i, stage in enumerate(net.stages):
            for j, block in enumerate(stage.blocks):
                for conv, _ in block.pairs():
                    self.position[conv.name] = (i, j)
        self.chunks = []
        with T.no_grad():
            for s in range(0, len(images), PROXY_CHUNK):
                h = net.stem(Tensor(images[s:s + PROXY_CHUNK], dtype=net.fc.weight.dtype), False)
                inputs = {}
                for i, stage in enumerate(net.stages):
                    for j, block in enumerate(stage.blocks):
                        inputs[(i, j)] = h
                        h = block.forward(h, False)
                self.chunks.append(inputs)

    def start(self, group: PruneGroup):
        return min(self.position[s.layer_id] for s in group.slots)

    def logits(self, start) -> np.ndarray:
        si, bj = start
        out = []
        with T.no_grad():
            for inputs in self.chunks:
                h = inputs[(si, bj)]
                for block in self.net.stages[si].blocks[bj:]:
                    h = block.forward(h, False)
                h = self.net.run_stages(h, False, start=si + 1)
                out.append(self.net.head(h).data)
        return np.concatenate(out).astype(np.float64)


# --------------------------------------------------------------------------
# criteria


class Scorer:
    """Scores groups of one network against one fixed proxy set."""

    def __init__(self, net: NetworkGraph, proxy: ProxySet | None = None):
        self.net = net
        self.proxy = proxy
        self._cache = None
        self._baseline = None

    @property
    def cache(self) -> _StageCache:
        if self.proxy is None:
            raise ValueError("this criterion needs a proxy set")
        if self._cache is None:
            self._cache = _StageCache(self.net, self.proxy.images)
        return self._cache

    def zeroed_logits(self, group: PruneGroup) -> np.ndarray:
        with zeroed(self.net, group):
            return self.cache.logits(self.cache.start(group))

    def kl(self, group: PruneGroup) -> ImportanceScore:
        q = softmax64(self.zeroed_logits(group))
        s = float(np.mean(kl_divergence(self.proxy.reference_probs, q)))
        if not math.isfinite(s):
            raise FloatingPointError(f"group {group.group_id}: non-finite KL score")
        return ImportanceScore(group.group_id, max(s, 0.0))

    def delta_loss(self, group: PruneGroup) -> ImportanceScore:
        if self.proxy is None or self.proxy.labels is None:
            raise ValueError("delta_loss needs a labeled proxy set")
        if self._baseline is None:
            self._baseline = _cross_entropy(self.cache.logits((0, 0)), self.proxy.labels)
        return ImportanceScore(group.group_id, _cross_entropy(self.zeroed_logits(group), self.proxy.labels)
                               - self._baseline)

    def weight_sum(self, group: PruneGroup) -> ImportanceScore:
        return weight_sum_score(self.net, group)


def _cross_entropy(logits, labels) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def kl_score(net: NetworkGraph, group: PruneGroup, proxy: ProxySet) -> ImportanceScore:
    """Mean over proxy images of D_KL(p || q), q the softmax with ``group`` zeroed."""
    return Scorer(net, proxy).kl(group)


def delta_loss_score(net: NetworkGraph, group: PruneGroup, proxy: ProxySet, labels=None) -> ImportanceScore:
    if labels is not None:
        proxy = ProxySet(proxy.images, proxy.reference_probs, proxy.indices, np.asarray(labels))
    return Scorer(net, proxy).delta_loss(group)


def filter_l1(weight: np.ndarray, channel: int) -> float:
    return float(np.abs(np.asarray(weight[channel], dtype=np.float64)).sum())


def weight_sum_score(net: NetworkGraph, group: PruneGroup) -> ImportanceScore:
    """Sum over slots of the l1 norm of each slot's output filter."""
    s = sum(filter_l1(net.layer(slot.layer_id).weight.data, slot.channel_index) for slot in group.slots)
    return ImportanceScore(group.group_id, s)


def random_score(group: PruneGroup, seed: int) -> ImportanceScore:
    return ImportanceScore(group.group_id, float(np.random.default_rng([seed, group.group_id]).random()))


def score_groups(net: NetworkGraph, groups, criterion: str, proxy: ProxySet | None = None,
                 seed: int = 0) -> list[ImportanceScore]:
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")
    if criterion == "random":
        return [random_score(g, seed) for g in groups]
    scorer = Scorer(net, proxy)
    fn = {"kl": scorer.kl, "delta_loss": scorer.delta_loss, "weight_sum": scorer.weight_sum}[criterion]
    return [fn(g) for g in groups]


# --------------------------------------------------------------------------
# plans


@dataclass
class PlanRow:
    group_id: int
    space: str
    channel: int
    stage_id: int | None
    score: float
    removed: bool


@dataclass
class PruningPlan:
    criterion: str
    seed: int
    proxy_digest: str
    retention_floor: float
    target: dict
    space_widths: dict
    rows: list = field(default_factory=list)
    shortfall: dict | None = None

    @property
    def removed(self) -> list[PlanRow]:
        return [r for r in self.rows if r.removed]

    def removed_by_space(self) -> dict:
        out: dict = {}
        for r in self.removed:
            out.setdefault(r.space, []).append(r.channel)
        return out

    def to_json(self) -> str:
        doc = {
            "criterion": self.criterion,
            "seed": self.seed,
            "proxy_digest": self.proxy_digest,
            "retention_floor": self.retention_floor,
            "target": self.target,
            "space_widths": self.space_widths,
            "shortfall": self.shortfall,
            "rows": [[r.group_id, r.space, r.channel, r.stage_id, r.score, r.removed] for r in self.rows],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        doc = json.loads(text)
        rows = [PlanRow(*r) for r in doc.pop("rows")]
        return cls(rows=rows, **doc)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "PruningPlan":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def parse_target(target) -> dict:
    """``{"k": int}`` (group count) or ``{"macs_ratio": float}``; bare ints/floats are accepted."""
    if isinstance(target, dict):
        if set(target) == {"k"} and int(target["k"]) >= 0:
            return {"k": int(target["k"])}
        if set(target) == {"macs_ratio"} and 0 < float(target["macs_ratio"]) <= 1:
            return {"macs_ratio": float(target["macs_ratio"])}
        raise ValueError(f"bad pruning target {target!r}")
    if isinstance(target, (bool, np.bool_)):
        raise ValueError(f"bad pruning target {target!r}")
    if isinstance(target, (int, np.integer)):
        return parse_target({"k": int(target)})
    return parse_target({"macs_ratio": float(target)})


def floor_width(width: int, retention_floor: float) -> int:
    # guard against 0.3 * 10 = 3.0000000000000004 rounding up to 4
    return int(math.ceil(round(retention_floor * width, 9)))


def make_plan(net: NetworkGraph, groups, scores, target, retention_floor: float = 0.3,
              criterion: str = "", seed: int = 0, proxy_digest: str = "") -> PruningPlan:
    """Greedy ascending-score removal under per-space retention floors.

    Ties are broken by (score, stage_id, group_id). Groups of non-prunable
    spaces are never removed. An unreachable target yields the best feasible
    plan with a shortfall report.
    """
    if not 0 < retention_floor <= 1:
        raise ValueError(f"retention_floor must be in (0, 1], got {retention_floor}")
    target = parse_target(target)
    by_id = {s.group_id: s.score for s in scores}
    if len(by_id) != len(scores) or {g.group_id for g in groups} != set(by_id):
        raise ValueError("make_plan: need exactly one score per group")
    if any(not math.isfinite(s) for s in by_id.values()):
        raise ValueError("make_plan: scores must be finite")
    spaces = {s.name: s for s in net.channel_spaces()}
    widths = net.space_widths()
    floors = {name: floor_width(w, retention_floor) for name, w in widths.items()}
    order = sorted(groups, key=lambda g: (by_id[g.group_id], -1 if g.stage_id is None else g.stage_id, g.group_id))

    current = dict(widths)
    base_macs = macs_for_widths(net, widths)[0]
    removed = set()

    def reached():
        if "k" in target:
            return len(removed) >= target["k"]
        return macs_for_widths(net, current)[0] <= target["macs_ratio"] * base_macs

    for g in order:
        if reached():
            break
        space = spaces.get(g.space)
        if space is None or not space.prunable:
            continue
        if current[g.space] - 1 < floors[g.space]:
            continue
        current[g.space] -= 1
        removed.add(g.group_id)

    shortfall = None
    if not reached():
        if "k" in target:
            shortfall = {"requested_groups": target["k"], "removed_groups": len(removed)}
        else:
            shortfall = {"requested_macs_ratio": target["macs_ratio"],
                         "achieved_macs_ratio": macs_for_widths(net, current)[0] / base_macs}
        logger.warning("pruning target %s unreachable under retention floor %.3g: %s", target, retention_floor, shortfall)
    rows = [PlanRow(g.group_id, g.space, g.channel, g.stage_id, float(by_id[g.group_id]), g.group_id in removed)
            for g in order]
    return PruningPlan(criterion, int(seed), proxy_digest, float(retention_floor), target, widths, rows, shortfall)


# --------------------------------------------------------------------------
# surgery


def _slice_param(p: Parameter, index, axis=0) -> Parameter:
    out = Parameter(np.ascontiguousarray(np.take(p.data, index, axis=axis)), trainable=p.trainable)
    return out


def apply_surgery(net: NetworkGraph, plan: PruningPlan) -> NetworkGraph:
    """Return a physically smaller copy of ``net`` with the plan's channels removed."""
    widths = net.space_widths()
    if plan.space_widths != widths:
        raise PlanMismatchError(f"plan was made for channel widths {plan.space_widths}, net has {widths}")
    spaces = {s.name: s for s in net.channel_spaces()}
    removed = plan.removed_by_space()
    for name, chans in removed.items():
        if not spaces[name].prunable:
            raise PlanMismatchError(f"plan removes channels of non-prunable space {name}")
        if len(set(chans)) != len(chans) or min(chans) < 0 or max(chans) >= widths[name]:
            raise PlanMismatchError(f"plan has invalid channels for space {name}")
    keep = {name: np.array([c for c in range(w) if c not in set(removed.get(name, ()))], dtype=np.int64)
            for name, w in widths.items()}

    out = net.clone()
    for conv, bn in out.conv_bn_pairs():
        ko = keep[conv.out_space]
        conv.weight = _slice_param(conv.weight, ko, axis=0)
        if conv.bias is not None:
            conv.bias = _slice_param(conv.bias, ko)
        if conv.depthwise:
            conv.groups = len(ko)
        elif conv.in_space != "input":
            conv.weight = _slice_param(conv.weight, keep[conv.in_space], axis=1)
        bn.gamma = _slice_param(bn.gamma, ko)
        bn.beta = _slice_param(bn.beta, ko)
        bn.running_mean = np.ascontiguousarray(bn.running_mean[ko])
        bn.running_var = np.ascontiguousarray(bn.running_var[ko])
    out.fc.weight = _slice_param(out.fc.weight, keep[out.fc.in_space], axis=0)
    try:
        out.validate()
    except T.ShapeError as err:
        raise AssertionError(f"surgery left an inconsistent graph: {err}") from err
    return out

"""Two-step limited-data fine-tuning.

Step 1 distils the teacher into the pruned student on mixup batches of the
original data. Step 2 trains on the expanded data against per-record teacher
logits ``u`` that are themselves refined by SGD (``u <- u - eta * dL/du``).

``KL(a || b)`` always means ``sum a * log(a / b)``; step 1 uses KL(p || q),
step 2 the reversed KL(q || p), with p the teacher and q the student
distribution at temperature T. Cross-entropy terms use the student at T = 1.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .augment import TRANSFORMS, expand_dataset, hflip, mixup, one_hot
from .data import Dataset, iterate_batches, normalize
from .nn import NetworkGraph
from .schedule import WarmupCosine
from .tensor import Parameter, Tensor
from .training import MetricsLog, accuracy, predict_logits, soft_cross_entropy

logger = logging.getLogger(__name__)

STORE_MAGIC = b"CURLLOGT\x01"
ARMS = ("plain", "mixup", "kd_mixup", "curl")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float
    alpha: float
    step: str

    def __post_init__(self):
        if self.step not in ("step1", "step2"):
            raise ValueError(f"step must be step1 or step2, got {self.step!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @classmethod
    def step1(cls, temperature=2.0, alpha=0.7):
        return cls(temperature, alpha, "step1")

    @classmethod
    def step2(cls, temperature=1.0, alpha=0.7):
        return cls(temperature, alpha, "step2")


def _const(value, like: Tensor) -> Tensor:
    return Tensor(np.asarray(value), dtype=like.dtype)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def _kl_rows(log_a: Tensor, log_b: Tensor) -> Tensor:
    """Batch mean of sum(exp(log_a) * (log_a - log_b))."""
    n = log_a.shape[0]
    terms = T.mul(T.exp(log_a), T.sub(log_a, log_b))
    return T.mul(T.sum_(terms), _const(1.0 / n, terms))


def step1_loss(v, u, y_soft, cfg: DistillConfig, parts: dict | None = None) -> Tensor:
    """alpha * T^2 * KL(p || q) + (1 - alpha) * CE(softmax(v), y); gradient reaches v only."""
    if cfg.step != "step1":
        raise ValueError("step1_loss needs a step1 config")
    v = _as_tensor(v, np.float32)
    u = np.asarray(u.data if isinstance(u, Tensor) else u)
    if v.shape != u.shape or np.shape(y_soft) != v.shape:
        raise T.ShapeError(f"step1_loss: logits {v.shape}, teacher {u.shape}, labels {np.shape(y_soft)} disagree")
    t = cfg.temperature
    log_p = Tensor(_log_softmax_np(u / t), dtype=v.dtype)
    log_q = T.log_softmax(T.mul(v, _const(1.0 / t, v)))
    kl = _kl_rows(log_p, log_q)
    ce = soft_cross_entropy(v, y_soft)
    if parts is not None:
        parts.update(kl=float(kl.data), ce=float(ce.data))
    return T.add(T.mul(kl, _const(cfg.alpha * t * t, kl)), T.mul(ce, _const(1 - cfg.alpha, ce)))


def step2_loss(v, u, y, cfg: DistillConfig, parts: dict | None = None) -> Tensor:
    """alpha * T^2 * KL(q || p) + (1 - alpha) * CE(softmax(v), y); gradients reach v and u.

    ``y`` is hard labels (integers) or a one-hot / soft matrix.
    """
    if cfg.step != "step2":
        raise ValueError("step2_loss needs a step2 config")
    v = _as_tensor(v, np.float32)
    u = _as_tensor(u, v.dtype)
    y = np.asarray(y)
    if y.ndim == 1:
        y = one_hot(y, v.shape[1], dtype=v.dtype)
    if v.shape != u.shape or y.shape != v.shape:
        raise T.ShapeError(f"step2_loss: logits {v.shape}, stored {u.shape}, labels {y.shape} disagree")
    t = cfg.temperature
    log_q = T.log_softmax(T.mul(v, _const(1.0 / t, v)))
    log_p = T.log_softmax(T.mul(u, _const(1.0 / t, u)))
    kl = _kl_rows(log_q, log_p)
    ce = soft_cross_entropy(v, y)
    if parts is not None:
        parts.update(kl=float(kl.data), ce=float(ce.data))
    return T.add(T.mul(kl, _const(cfg.alpha * t * t, kl)), T.mul(ce, _const(1 - cfg.alpha, ce)))


def _log_softmax_np(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# logit store


class LogitStore:
    """Per-record teacher logits refined during step 2."""

    def __init__(self, logits, eta: float = 1.0, epoch: int = 0):
        self.u = np.array(logits, dtype=np.float32)
        if self.u.ndim != 2:
            raise ValueError(f"logit store needs [records, classes], got {self.u.shape}")
        if eta < 0:
            raise ValueError(f"eta must be nonnegative, got {eta}")
        self.eta = float(eta)
        self.epoch = int(epoch)

    @property
    def class_count(self):
        return self.u.shape[1]

    def __len__(self):
        return self.u.shape[0]

    def get(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        bad = ids[(ids < 0) | (ids >= len(self))]
        if bad.size:
            raise KeyError(f"record ids {bad.tolist()[:5]} missing from logit store of {len(self)} records")
        return self.u[ids].copy()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(STORE_MAGIC)
            fh.write(struct.pack("<IIdI", self.class_count, len(self), self.eta, self.epoch))
            T.write_tensor(fh, self.u)

    @classmethod
    def load(cls, path) -> "LogitStore":
        with open(path, "rb") as fh:
            if fh.read(len(STORE_MAGIC)) != STORE_MAGIC:
                raise ValueError(f"{path}: not a logit store")
            classes, n, eta, epoch = struct.unpack("<IIdI", fh.read(struct.calcsize("<IIdI")))
            u = T.read_tensor(fh)
        if u.shape != (n, classes):
            raise ValueError(f"{path}: header says {(n, classes)}, payload is {u.shape}")
        return cls(u, eta, epoch)


def refine_logits(store: LogitStore, batch_ids, grads) -> int:
    """u <- u - eta * grad for each record; rows with non-finite gradients are skipped.

    Returns the number of records updated.
    """
    ids = np.asarray(batch_ids, dtype=np.int64)
    grads = np.asarray(grads)
    store.get(ids)  # validates ids
    if grads.shape != (len(ids), store.class_count):
        raise T.ShapeError(f"refine_logits: grads {grads.shape} for {len(ids)} records of {store.class_count} classes")
    ok = np.all(np.isfinite(grads), axis=1)
    if not ok.all():
        logger.warning("refine_logits: skipping %d records with non-finite gradients: %s",
                       int((~ok).sum()), ids[~ok].tolist()[:10])
    if store.eta == 0:
        return 0
    store.u[ids[ok]] -= (store.eta * grads[ok]).astype(store.u.dtype)
    return int(ok.sum())


# --------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneConfig:
    arm: str = "curl"
    epochs1: int = 25
    epochs2: int = 2
    lr1: float = 0.01
    lr2: float = 1e-4
    warmup1: int = 5
    warmup2: int = 0
    temperature1: float = 2.0
    temperature2: float = 1.0
    alpha: float = 0.7
    eta: float = 1.0
    mixup_alpha: float = 1.0
    expand: bool = True
    refine: bool = True
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    flip: bool = True
    match_budget: bool = True  # baseline arms train epochs1 + 6 * epochs2
    seed: int = 0

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"unknown arm {self.arm!r}; choose from {ARMS}")


@dataclass
class FinetuneResult:
    net: NetworkGraph
    log: MetricsLog
    store: LogitStore | None = None
    final_accuracy: float | None = None
    extra: dict = field(default_factory=dict)


def _params(net):
    return [p for p in net.parameters() if p.trainable]


def baseline_epochs(cfg: FinetuneConfig) -> int:
    """Epochs a non-CURL arm trains for: the same budget as step 1 plus the expanded step 2."""
    if cfg.arm == "curl" or not cfg.match_budget:
        return cfg.epochs1
    return cfg.epochs1 + len(TRANSFORMS) * cfg.epochs2


def _step1(student, teacher, train: Dataset, cfg: FinetuneConfig, norm, log, rng):
    epochs = baseline_epochs(cfg)
    x_all = normalize(train.images, *norm)
    y_all = one_hot(train.labels, train.class_count)
    steps = len(list(iterate_batches(len(train), cfg.batch_size)))
    sched = WarmupCosine.for_epochs(cfg.lr1, epochs, steps, cfg.warmup1)
    dcfg = DistillConfig.step1(cfg.temperature1, cfg.alpha)
    use_mix = cfg.arm != "plain"
    use_kd = cfg.arm in ("kd_mixup", "curl")
    step = 0
    for epoch in range(epochs):
        sums = {"loss": 0.0, "kl": 0.0, "ce": 0.0}
        seen = 0
        for idx in iterate_batches(len(train), cfg.batch_size, rng):
            x, y = x_all[idx], y_all[idx]
            if cfg.flip:
                x = hflip(x, rng)
            if use_mix:
                perm = rng.permutation(len(idx))
                m = mixup(x, y, x[perm], y[perm], cfg.mixup_alpha, rng)
                x, y = m.x, m.y
            v = student.forward(Tensor(x), training=True)
            parts = {}
            if use_kd:
                u = predict_logits(teacher, x)
                loss = step1_loss(v, u, y, dcfg, parts)
            else:
                loss = soft_cross_entropy(v, y)
                parts = {"kl": 0.0, "ce": float(loss.data)}
            T.backward(loss)
            T.sgd_step(_params(student), sched(step), cfg.momentum, cfg.weight_decay)
            step += 1
            sums["loss"] += float(loss.data) * len(idx)
            sums["kl"] += parts["kl"] * len(idx)
            sums["ce"] += parts["ce"] * len(idx)
            seen += len(idx)
        log.write(phase="step1", epoch=epoch, split="train", **{k: v / max(seen, 1) for k, v in sums.items()})


def seed_store(teacher: NetworkGraph, data: Dataset, norm, eta: float) -> LogitStore:
    """Teacher logits on every record, extracted once before step 2."""
    return LogitStore(predict_logits(teacher, normalize(data.images, *norm)), eta=eta)


def _step2(student, teacher, data: Dataset, cfg: FinetuneConfig, norm, log, rng, store_path=None):
    store = seed_store(teacher, data, norm, cfg.eta if cfg.refine else 0.0)
    x_all = normalize(data.images, *norm)
    steps = len(list(iterate_batches(len(data), cfg.batch_size)))
    sched = WarmupCosine.for_epochs(cfg.lr2, cfg.epochs2, steps, cfg.warmup2)
    dcfg = DistillConfig.step2(cfg.temperature2, cfg.alpha)
    step = 0
    for epoch in range(cfg.epochs2):
        sums = {"loss": 0.0, "kl": 0.0, "ce": 0.0}
        seen = 0
        for idx in iterate_batches(len(data), cfg.batch_size, rng):
            x = x_all[idx]
            if cfg.flip:
                x = hflip(x, rng)
            u = Parameter(store.get(idx), dtype=np.float32)
            v = student.forward(Tensor(x), training=True)
            parts = {}
            loss = step2_loss(v, u, data.labels[idx], dcfg, parts)
            T.backward(loss)
            T.sgd_step(_params(student), sched(step), cfg.momentum, cfg.weight_decay)
            refine_logits(store, idx, u.grad)
            step += 1
            sums["loss"] += float(loss.data) * len(idx)
            sums["kl"] += parts["kl"] * len(idx)
            sums["ce"] += parts["ce"] * len(idx)
            seen += len(idx)
        store.epoch = epoch + 1
        if store_path is not None:
            store.save(store_path)
        log.write(phase="step2", epoch=epoch, split="train", **{k: v / max(seen, 1) for k, v in sums.items()})
    return store


def finetune(student: NetworkGraph, teacher: NetworkGraph | None, train: Dataset, cfg: FinetuneConfig, norm,
             eval_set: Dataset | None = None, expanded: Dataset | None = None, log: MetricsLog | None = None,
             store_path=None) -> FinetuneResult:
    """Fine-tune ``student`` in place according to ``cfg.arm``.

    ``plain``: cross-entropy; ``mixup``: cross-entropy on mixup batches;
    ``kd_mixup``: step 1 only; ``curl``: step 1 then step 2. The teacher is
    only ever run in eval mode without gradients.
    """
    log = log if log is not None else MetricsLog()
    needs_teacher = cfg.arm in ("kd_mixup", "curl")
    if needs_teacher:
        if teacher is None:
            raise ValueError(f"arm {cfg.arm} needs a teacher")
        if teacher.class_count != student.class_count:
            raise ValueError(f"teacher has {teacher.class_count} classes, student {student.class_count}")
    rng = np.random.default_rng([cfg.seed, 202])
    _step1(student, teacher, train, cfg, norm, log, rng)
    store = None
    if cfg.arm == "curl" and cfg.epochs2 > 0:
        data = expanded if expanded is not None else train
        if cfg.expand and expanded is None:
            data = expand_dataset(train, cfg.seed)
        store = _step2(student, teacher, data, cfg, norm, log, rng, store_path)
    result = FinetuneResult(student, log, store)
    if eval_set is not None:
        result.final_accuracy = accuracy(student, eval_set, norm)
        log.write(phase="final", epoch=baseline_epochs(cfg) + (cfg.epochs2 if cfg.arm == "curl" else 0),
                  split=eval_set.split, accuracy=result.final_accuracy)
    return result


def config_dict(cfg: FinetuneConfig) -> dict:
    return asdict(cfg)


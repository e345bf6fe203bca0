"""Triplet ranking loss, memory-bank contrastive loss and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, DegenerateVectorError, NonFiniteError, TrainingDivergedError
from .model import CrossEncoder, pad_batch, tokenize
from .numerics import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    epochs: int = 10
    batch_size: int = 16
    grad_accum_steps: int = 2
    scheduler: str = "cosine"
    margin: float = 1.0
    memory_bank_size: int = 512
    memory_bank_weight: float = 0.5
    seed: int = 0
    recompute_activations: bool = True
    optimizer: str = "sgd"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.grad_accum_steps < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ContractError("epochs, batch_size and grad_accum_steps must be >= 1")
        if self.margin < 0:
            raise ContractError("margin must be non-negative")
        if not 0.0 <= self.memory_bank_weight <= 1.0:
            raise ContractError("memory_bank_weight must lie in [0, 1]")
        if self.memory_bank_size < 1:
            raise ContractError("memory_bank_size must be positive")
        if self.scheduler != "cosine":
            raise ContractError(f"unknown scheduler {self.scheduler!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))


# --------------------------------------------------------------- losses


def triplet_loss(s_pos, s_neg, margin: float = 1.0, neg_mask=None) -> Tensor:
    """Mean of max(0, margin - s_pos + s_neg).

    ``s_pos`` has shape (B,) (or is a scalar); ``s_neg`` has shape (B,) or
    (B, n). With several negatives the hinge is averaged over each query's
    valid negatives (``neg_mask``), then over the batch.
    """
    if margin < 0:
        raise ContractError("margin must be non-negative")
    s_pos = s_pos if isinstance(s_pos, Tensor) else Tensor(np.asarray(s_pos, dtype=np.float64))
    s_neg = s_neg if isinstance(s_neg, Tensor) else Tensor(np.asarray(s_neg, dtype=s_pos.dtype))
    if s_neg.ndim == s_pos.ndim + 1:
        s_pos = nx.reshape(s_pos, s_pos.shape + (1,))
    hinge = nx.relu(nx.add(nx.sub(margin, s_pos), s_neg))
    if hinge.ndim < 2:
        return nx.mean(hinge)
    if neg_mask is None:
        neg_mask = np.ones(hinge.shape, dtype=bool)
    m = np.asarray(neg_mask, dtype=hinge.dtype)
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ContractError("every query needs at least one negative")
    per_query = nx.sum(nx.div(nx.mul(hinge, Tensor(m)), Tensor(counts)), axis=1)
    return nx.mean(per_query)


class MemoryBank:
    """Bounded queue of detached embeddings, newest first."""

    def __init__(self, capacity: int, entries=None):
        if capacity < 1:
            raise ContractError("memory bank capacity must be positive")
        self.capacity = capacity
        self.entries = None if entries is None else np.array(entries[:capacity], copy=True)

    def __len__(self):
        return 0 if self.entries is None else len(self.entries)

    def pushed(self, vectors) -> "MemoryBank":
        """New bank with ``vectors`` prepended and the tail cut at capacity."""
        vectors = np.asarray(vectors.data if isinstance(vectors, Tensor) else vectors)
        queue = vectors if self.entries is None else np.concatenate([vectors, self.entries.astype(vectors.dtype)])
        return MemoryBank(self.capacity, queue[: self.capacity])


def memory_bank_step(anchors: Tensor, positives, bank: MemoryBank):
    """Queue the positives and score anchors against the whole queue.

    Follows the queue-then-score recipe: prepend detached positives, truncate
    to capacity, take the B x |queue| cosine matrix and apply cross-entropy
    with target i for anchor i (its positive sits at queue slot i).
    Returns ``(loss, updated_bank)``.
    """
    anchors = anchors if isinstance(anchors, Tensor) else Tensor(anchors)
    pos = np.asarray(positives.data if isinstance(positives, Tensor) else positives, dtype=anchors.dtype)
    b = anchors.shape[0]
    if pos.shape != anchors.shape:
        raise ContractError(f"anchors {anchors.shape} and positives {pos.shape} must align")
    if b > bank.capacity:
        raise ContractError(f"batch of {b} exceeds memory bank capacity {bank.capacity}")
    if np.any(np.linalg.norm(pos, axis=1) == 0):
        raise DegenerateVectorError("zero-norm positive embedding")
    new_bank = bank.pushed(pos)
    scores = nx.cosine_matrix(anchors, Tensor(new_bank.entries))
    loss = nx.cross_entropy(scores, np.arange(b))
    return loss, new_bank


def cosine_lr(step: int, total_steps: int, peak: float) -> float:
    """peak * 0.5 * (1 + cos(pi * step / total_steps)), no warmup."""
    if total_steps < 1:
        raise ContractError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return max(0.0, peak * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


# ------------------------------------------------------------- optimizer


class _Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        if self.cfg.optimizer == "sgd":
            for name, p in params.items():
                p.data = (p.data - lr * grads[name]).astype(p.dtype, copy=False)
            return
        b1, b2 = self.cfg.adam_betas
        for name, p in params.items():
            g = grads[name]
            m = self.m[name] = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = self.v[name] = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.cfg.adam_eps)).astype(p.dtype, copy=False)


# -------------------------------------------------------------- loss trace


@dataclass
class LossTrace:
    steps: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    triplet: list = field(default_factory=list)
    bank: list = field(default_factory=list)
    total: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    peak_saved_elements: int = 0

    HEADER = ("step", "lr", "triplet_loss", "bank_loss", "total")

    def append(self, step, lr, trip, bank, total, epoch):
        self.steps.append(step)
        self.lrs.append(lr)
        self.triplet.append(trip)
        self.bank.append(bank)
        self.total.append(total)
        self.epochs.append(epoch)

    def epoch_means(self):
        out = {}
        for e, t in zip(self.epochs, self.total):
            out.setdefault(e, []).append(t)
        return [float(np.mean(out[e])) for e in sorted(out)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for row in zip(self.steps, self.lrs, self.triplet, self.bank, self.total):
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()


# --------------------------------------------------------------- training


def _encode_records(model, records):
    """Pre-tokenized (query, pos[0], negs) id lists per record."""
    out = []
    for r in records:
        if not r.pos or not r.neg:
            raise ContractError("every training record needs at least one pos and one neg")
        q = tokenize(r.query, model.vocab)
        out.append((q, tokenize(r.pos[0], model.vocab), [tokenize(n, model.vocab) for n in r.neg]))
    return out


def _micro_losses(model, encoded, cfg, bank, meter=None):
    """Triplet and memory-bank losses of one micro-batch (under the active tape)."""
    n_neg = max(len(e[2]) for e in encoded)
    pairs, neg_mask = [], np.zeros((len(encoded), n_neg), dtype=bool)
    for i, (q, p, negs) in enumerate(encoded):
        pairs.append(model.pack_pair(q, p))
        for j in range(n_neg):
            neg_mask[i, j] = j < len(negs)
            pairs.append(model.pack_pair(q, negs[j] if j < len(negs) else negs[0]))
    ids, mask = pad_batch(pairs)
    scores = model.score_batch(ids, mask, cfg.recompute_activations, meter)
    scores = nx.reshape(scores, (len(encoded), n_neg + 1))
    s_pos = nx.getitem(scores, (slice(None), 0))
    s_neg = nx.getitem(scores, (slice(None), slice(1, None)))
    trip = triplet_loss(s_pos, s_neg, cfg.margin, neg_mask)
    if cfg.memory_bank_weight == 0:
        return trip, None, bank
    q_ids, q_mask = pad_batch([model.pack_single(e[0]) for e in encoded])
    anchors = model.embed_batch(q_ids, q_mask, cfg.recompute_activations, meter)
    with nx.no_grad():
        p_ids, p_mask = pad_batch([model.pack_single(e[1]) for e in encoded])
        positives = model.embed_batch(p_ids, p_mask).data
    bank_loss, bank = memory_bank_step(anchors, positives, bank)
    return trip, bank_loss, bank


def train(model: CrossEncoder, triplets, cfg: TrainConfig, on_step=None):
    """Train a copy of ``model``; returns ``(trained_model, LossTrace)``.

    Each macro-step draws ``batch_size * grad_accum_steps`` records (seeded
    shuffle per epoch), accumulates gradients over ``grad_accum_steps``
    micro-batches and applies one update at the cosine-scheduled rate. The
    objective is ``(1 - w) * triplet + w * memory_bank``.
    """
    records = list(triplets)
    if not records:
        raise ContractError("training needs at least one triplet")
    model = model.copy()
    encoded = _encode_records(model, records)
    macro = cfg.batch_size * cfg.grad_accum_steps
    steps_per_epoch = math.ceil(len(records) / macro)
    total_steps = steps_per_epoch * cfg.epochs
    w = cfg.memory_bank_weight
    if w > 0 and min(cfg.batch_size, len(records)) > cfg.memory_bank_size:
        raise ContractError("batch_size exceeds memory_bank_size")
    opt = _Optimizer(cfg)
    bank = MemoryBank(cfg.memory_bank_size)
    trace = LossTrace()
    params = model.params
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(records))
        for s in range(0, len(order), macro):
            macro_idx = order[s : s + macro]
            lr = cosine_lr(step, total_steps, cfg.learning_rate)
            grads = {n: np.zeros_like(p.data) for n, p in params.items()}
            trip_acc = bank_acc = total_acc = 0.0
            for ms in range(0, len(macro_idx), cfg.batch_size):
                micro_idx = macro_idx[ms : ms + cfg.batch_size]
                weight = len(micro_idx) / len(macro_idx)
                # overflow surfaces as NonFiniteError from the ops themselves
                try:
                    with nx.Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                        trip, bank_loss, bank = _micro_losses(model, [encoded[i] for i in micro_idx], cfg, bank)
                        loss = trip if bank_loss is None else nx.add(nx.mul(trip, 1.0 - w), nx.mul(bank_loss, w))
                        loss = nx.mul(loss, weight)
                    g = nx.backward(tape, loss)
                except NonFiniteError as exc:
                    raise TrainingDivergedError(str(exc), step, micro_idx) from exc
                trace.peak_saved_elements = max(trace.peak_saved_elements, tape.saved_elements)
                for n, p in params.items():
                    gp = g.get(p)
                    if gp is not None:
                        grads[n] += gp
                trip_acc += weight * trip.item()
                bank_acc += weight * (0.0 if bank_loss is None else bank_loss.item())
                total_acc += loss.item()
            if not math.isfinite(total_acc):
                raise TrainingDivergedError("non-finite loss", step, macro_idx)
            opt.step(params, grads, lr)
            trace.append(step, lr, trip_acc, bank_acc, total_acc, epoch)
            if on_step is not None:
                on_step(step, total_acc)
            step += 1
        log.debug("epoch %d mean loss %.5f", epoch, trace.epoch_means()[-1])
    return model, trace

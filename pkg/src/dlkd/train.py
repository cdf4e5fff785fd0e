"""Teacher, baseline and distilled-student training loops.

The teacher sees enhanced clips; baseline and student only ever see raw clips.
Teacher soft targets are computed once from the final teacher checkpoint and
cached in a LogitStore (offline distillation).
"""
from __future__ import annotations

import csv
import logging
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from dlkd.enhance import EnhanceParams, enhance
from dlkd.errors import ConsistencyError, FormatError, ParameterError, ShapeError, TrainingError
from dlkd.losses import LossWeights, cross_entropy, kl_soft_targets, student_total_loss
from dlkd.metrics import predict_logits, top_k_accuracy
from dlkd.model import ModelConfig, build_classifier, forward
from dlkd.tensor import AdamW, Tensor, backward, no_grad

log = logging.getLogger(__name__)

LOGIT_MAGIC = b"DLKL"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    enhance: EnhanceParams = field(default_factory=EnhanceParams)
    shuffle_seed: int = 0
    init_seed: int = 0
    widths: tuple = (16, 32)
    spatial_kernel: int = 3
    temporal_kernel: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    # None: subtract the mean pixel of the model's own training inputs (enhanced for the teacher)
    input_mean: float | None = None
    input_std: float = 0.225

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be > 0, got {self.lr}")
        if not self.input_std > 0:
            raise ParameterError(f"input_std must be > 0, got {self.input_std}")

    def model_config(self, num_classes, input_shape, input_mean=None):
        if self.input_mean is not None:
            input_mean = self.input_mean
        return ModelConfig(
            num_classes=num_classes,
            input_shape=tuple(input_shape),
            widths=tuple(self.widths),
            spatial_kernel=self.spatial_kernel,
            temporal_kernel=self.temporal_kernel,
            seed=self.init_seed,
            input_mean=0.0 if input_mean is None else float(input_mean),
            input_std=self.input_std,
        )


@dataclass
class EpochRecord:
    epoch: int
    l_ar: float
    l_kd: float
    total: float
    train_top1: float
    wall_seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainingRun:
    records: list
    model: object = field(compare=False)
    wall_seconds: float = field(default=0.0, compare=False)
    seeds: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "l_ar", "l_kd", "total", "train_top1", "wall_seconds"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.l_ar), repr(r.l_kd), repr(r.total), repr(r.train_top1),
                                 f"{r.wall_seconds:.3f}"])


def epoch_order(n, shuffle_seed, epoch):
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def _inputs(train, config, kind):
    """Stacked network inputs for one epoch; the teacher enhances every clip exactly once."""
    if kind == "teacher":
        return np.stack([enhance(c, config.enhance).data for c in train.clips])
    return train.stacked()


def _fit(train, config, kind, soft_targets=None, weights=None):
    if len(train) == 0:
        raise ParameterError("training set is empty")
    inputs = _inputs(train, config, kind)
    finite = inputs[np.isfinite(inputs)]
    # non-finite pixels are left for the NaN-loss check to report with epoch and step
    mean_pixel = float(np.mean(finite, dtype=np.float64)) if finite.size else 0.0
    model = build_classifier(config.model_config(train.num_classes, train.dims, mean_pixel))
    opt = AdamW(model.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                eps=config.eps, weight_decay=config.weight_decay)
    labels = train.labels
    n = len(train)
    records = []
    started = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        if kind == "teacher" and epoch > 1:
            inputs = _inputs(train, config, kind)
        order = epoch_order(n, config.shuffle_seed, epoch)
        sum_ar = sum_kd = sum_total = 0.0
        correct = 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            x = Tensor(inputs[idx])
            y = labels[idx]

            opt.zero_grad()
            logits = forward(model, x)
            l_ar = cross_entropy(logits, y)
            l_kd_value = 0.0
            if kind == "teacher":
                total = l_ar
            elif soft_targets is not None and weights.beta > 0:
                l_kd = kl_soft_targets(soft_targets[idx], logits, weights.temperature)
                l_kd_value = l_kd.item()
                total = student_total_loss(l_ar, l_kd, weights)
            else:
                if soft_targets is not None:
                    with no_grad():
                        l_kd_value = kl_soft_targets(soft_targets[idx], logits.detach(), weights.temperature).item()
                total = l_ar * weights.alpha
            total_value = total.item()
            if not np.isfinite(total_value):
                raise TrainingError(f"non-finite {kind} loss at epoch {epoch}, step {step}", epoch, step)
            backward(total, params=opt.params)
            opt.step()

            m = len(idx)
            sum_ar += l_ar.item() * m
            sum_kd += l_kd_value * m
            sum_total += total_value * m
            correct += round(top_k_accuracy(logits.data, y, 1) * m)
        record = EpochRecord(epoch, sum_ar / n, sum_kd / n, sum_total / n, correct / n,
                             time.perf_counter() - started)
        records.append(record)
        log.info("%s epoch %d: l_ar=%.4f l_kd=%.4f total=%.4f top1=%.3f", kind, epoch,
                 record.l_ar, record.l_kd, record.total, record.train_top1)
    seeds = {"init_seed": config.init_seed, "shuffle_seed": config.shuffle_seed}
    return model, TrainingRun(records, model, time.perf_counter() - started, seeds)


def train_teacher(train, config):
    """Enhance -> classify -> cross-entropy; enhancement runs once per clip per epoch."""
    return _fit(train, config, "teacher")


def train_baseline(train, config):
    """Raw clips, ground-truth cross-entropy only (distillation weight forced to zero)."""
    weights = replace(config.weights, beta=0.0)
    return _fit(train, config, "baseline", weights=weights)


def train_student(train, soft_targets, config):
    """Raw clips, alpha * CE + beta * KL against cached teacher logits."""
    targets = soft_targets.matrix(train.ids, train.num_classes)
    return _fit(train, config, "student", soft_targets=targets, weights=config.weights)


# ---------------------------------------------------------------------------
# teacher logit cache


@dataclass
class LogitStore:
    logits: dict
    teacher_hash: str

    def __len__(self):
        return len(self.logits)

    def __eq__(self, other):
        if not isinstance(other, LogitStore):
            return NotImplemented
        return (
            self.teacher_hash == other.teacher_hash
            and list(self.logits) == list(other.logits)
            and all(self.logits[k].tobytes() == other.logits[k].tobytes() for k in self.logits)
        )

    def matrix(self, clip_ids, num_classes):
        """Rows for ``clip_ids`` in order; raises before any training if one is missing."""
        missing = [cid for cid in clip_ids if cid not in self.logits]
        if missing:
            raise ConsistencyError(
                f"{len(missing)} training clip(s) have no teacher logits, e.g. {missing[:3]}"
            )
        rows = np.stack([self.logits[cid] for cid in clip_ids])
        if rows.shape[1] != num_classes:
            raise ConsistencyError(f"stored logits have {rows.shape[1]} classes, dataset has {num_classes}")
        return rows

    def to_bytes(self):
        k = len(next(iter(self.logits.values()))) if self.logits else 0
        parts = [LOGIT_MAGIC, bytes.fromhex(self.teacher_hash), struct.pack("<II", len(self.logits), k)]
        for cid, row in self.logits.items():
            encoded = cid.encode()
            parts.append(struct.pack("<H", len(encoded)) + encoded)
            parts.append(np.ascontiguousarray(row, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf):
        if buf[:4] != LOGIT_MAGIC:
            raise FormatError("bad logit-store magic", offset=0)
        if len(buf) < 44:
            raise FormatError("truncated logit-store header", offset=len(buf))
        teacher_hash = buf[4:36].hex()
        count, k = struct.unpack_from("<II", buf, 36)
        pos = 44
        logits = {}
        for _ in range(count):
            if pos + 2 > len(buf):
                raise FormatError("truncated clip-id length", offset=pos)
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if pos + n + 4 * k > len(buf):
                raise FormatError("truncated logit entry", offset=pos)
            cid = buf[pos : pos + n].decode()
            pos += n
            logits[cid] = np.frombuffer(buf, dtype="<f4", count=k, offset=pos).astype(np.float32)
            pos += 4 * k
        if pos != len(buf):
            raise FormatError("trailing bytes after last logit entry", offset=pos)
        return cls(logits, teacher_hash)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def cache_teacher_logits(teacher, params, train):
    """forward(teacher, enhance(clip)) for every training clip, without recording a graph."""
    if tuple(train.dims) != teacher.config.input_shape:
        raise ShapeError(f"teacher expects clips of shape {teacher.config.input_shape}, dataset has {train.dims}")
    ids = train.ids
    if len(set(ids)) != len(ids):
        raise ConsistencyError("training set contains duplicate clip ids")
    with no_grad():
        rows = predict_logits(teacher, train, enhance_params=params)
    logits = {cid: rows[i].astype(np.float32) for i, cid in enumerate(ids)}
    return LogitStore(logits, teacher.digest())



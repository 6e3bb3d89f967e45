"""Adam, the training loop (plateau LR reduction, early stopping, best-epoch restore), evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from thama.data import DOMAIN_NAMES, EmbeddingSet, batch_iter, check_aligned
from thama.errors import ConfigError, DataFormatError, NonFiniteError, ShapeError
from thama.metrics import compute_eer
from thama.models import Checkpoint, ModelInstance, ModelSpec, build_model, predict_batch

log = logging.getLogger(__name__)

Pair = tuple[EmbeddingSet, EmbeddingSet | None]


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, **hyper):
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update. Inputs are not modified."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"adam_step: shape mismatch for {name!r}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 10
    lr_patience: int = 5
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    min_delta: float = 1e-5
    monitor: Literal["loss", "eer"] = "loss"
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("lr, batch_size and max_epochs must be positive")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be positive")
        if self.lr_patience < 1 or not 0 < self.lr_factor < 1 or self.min_lr < 0 or self.min_delta < 0:
            raise ConfigError("invalid learning-rate schedule")
        if self.monitor not in ("loss", "eer"):
            raise ConfigError(f"monitor must be 'loss' or 'eer', got {self.monitor!r}")


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    dev_loss: list[float] = field(default_factory=list)
    dev_eer: list[float | None] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    # excluded from equality: the only non-reproducible column
    wall_time: list[float] = field(default_factory=list, compare=False)

    def to_dict(self, timing=True):
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d

    def __len__(self):
        return len(self.epoch)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: TrainHistory
    model: ModelInstance


def _views(pair: Pair):
    v1, v2 = pair
    check_aligned(v1, v2)
    return (v1.vectors,) if v2 is None else (v1.vectors, v2.vectors)


def _labels(pair: Pair):
    labels = pair[0].labels
    if not np.isin(labels, (0, 1)).all():
        raise DataFormatError("training/evaluation needs labelled records (0 or 1)")
    return labels


def _check_dims(model: ModelInstance, pair: Pair):
    v1, v2 = pair
    spec = model.spec
    if (v2 is None) != (spec.n_views == 1):
        raise ShapeError(f"{spec.kind} needs {spec.n_views} view(s)")
    if v1.dim != spec.d1 or (v2 is not None and v2.dim != spec.d2):
        raise ShapeError(f"data dims ({v1.dim}, {None if v2 is None else v2.dim}) != model ({spec.d1}, {spec.d2})")


def dataset_loss(model: ModelInstance, pair: Pair, chunk: int = 512) -> float:
    """Record-weighted mean BCE in inference mode."""
    views, labels = _views(pair), _labels(pair)
    total = 0.0
    n = len(labels)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        ev = model.graph.forward(model.bindings([v[sl] for v in views], labels[sl]), outputs=["loss"])
        total += float(ev["loss"]) * len(labels[sl])
    return total / n


def _safe_eer(scores, labels):
    if len(np.unique(labels)) < 2:
        return None
    return compute_eer(scores, labels)[0]


def train(model: ModelInstance, train_pair: Pair, dev_pair: Pair, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Minimize batch-mean BCE with Adam; restore the best dev epoch at the end.

    The model's parameters are updated in place and end at the best epoch.
    """
    _check_dims(model, train_pair)
    _check_dims(model, dev_pair)
    train_labels = _labels(train_pair)
    dev_labels = _labels(dev_pair)
    if len(train_labels) == 0 or len(dev_labels) == 0:
        raise DataFormatError("train and dev sets must be non-empty")

    graph = model.graph
    trainable = graph.trainable
    state = AdamState.fresh({k: graph.params[k] for k in trainable})
    dropout_rng = np.random.default_rng([config.seed, 1])
    shuffle_rng = np.random.default_rng([config.seed, 2])
    lr = config.lr
    best = np.inf
    best_params = model.copy_params()
    best_epoch = 0
    best_dev_loss = None
    wait = lr_wait = 0
    history = TrainHistory()
    v1, v2 = train_pair

    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        seen = 0
        loss_sum = 0.0
        shuffle_seed = int(shuffle_rng.integers(2**63))
        for b, batch in enumerate(batch_iter(v1, v2, config.batch_size, shuffle_seed)):
            try:
                ev = graph.forward(model.bindings(batch.views, batch.labels), outputs=["loss"], training=True, rng=dropout_rng)
                grads = graph.backward(ev, "loss")
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch {b}: {exc}", node=exc.node) from None
            params, state = adam_step({k: graph.params[k] for k in trainable}, grads, state, lr)
            graph.params.update(params)
            loss_sum += float(ev["loss"]) * len(batch.labels)
            seen += len(batch.labels)

        dev_loss = dataset_loss(model, dev_pair)
        dev_eer = _safe_eer(predict_batch(model, _views(dev_pair)), dev_labels)
        history.epoch.append(epoch)
        history.train_loss.append(loss_sum / seen)
        history.dev_loss.append(dev_loss)
        history.dev_eer.append(dev_eer)
        history.lr.append(lr)
        history.wall_time.append(time.perf_counter() - start)
        log.info("epoch %d train %.5f dev %.5f eer %s lr %.2e", epoch, loss_sum / seen, dev_loss, dev_eer, lr)

        monitored = dev_loss if config.monitor == "loss" or dev_eer is None else dev_eer
        if monitored < best - config.min_delta:
            best = monitored
            best_params = model.copy_params()
            best_epoch = epoch
            best_dev_loss = dev_loss
            wait = lr_wait = 0
        else:
            wait += 1
            lr_wait += 1
            if lr_wait >= config.lr_patience:
                if lr > config.min_lr:
                    lr = max(lr * config.lr_factor, config.min_lr)
                lr_wait = 0
            if wait >= config.early_stop_patience:
                break

    graph.params.update(best_params)
    meta = {"best_epoch": best_epoch, "best_dev_loss": best_dev_loss, "epochs_run": len(history)}
    return TrainResult(Checkpoint(model.spec, model.copy_params(), meta), history, model)


@dataclass
class EvalReport:
    eer: float
    threshold: float
    accuracy: float
    counts: dict[str, int]
    n: int
    train_domain: str | None = None
    test_domain: str | None = None

    @property
    def setting(self):
        """Table-style tag, e.g. ``E(TR)-C(TE)``."""
        return f"{self.train_domain}(TR)-{self.test_domain}(TE)"

    def to_dict(self):
        d = asdict(self)
        d["setting"] = self.setting
        return d


def domain_of(eset: EmbeddingSet) -> str | None:
    tags = np.unique(eset.domains)
    if len(tags) != 1:
        return None
    return DOMAIN_NAMES.get(int(tags[0]), str(int(tags[0])))


def evaluate(model: ModelInstance, test_pair: Pair, train_domain: str | None = None, test_domain: str | None = None) -> EvalReport:
    _check_dims(model, test_pair)
    labels = _labels(test_pair)
    if len(labels) == 0:
        raise DataFormatError("empty test set")
    scores = predict_batch(model, _views(test_pair))
    eer, threshold = compute_eer(scores, labels)
    accuracy = float(np.mean((scores >= 0.5) == (labels == 1)))
    counts = {"bonafide": int(np.sum(labels == 0)), "fake": int(np.sum(labels == 1))}
    if test_domain is None:
        test_domain = domain_of(test_pair[0])
    return EvalReport(eer, threshold, accuracy, counts, len(labels), train_domain, test_domain)


def cross_domain_run(
    spec: ModelSpec,
    domain_a: dict[str, Pair],
    domain_b: dict[str, Pair],
    config: TrainConfig = TrainConfig(),
    names: tuple[str, str] = ("E", "C"),
) -> tuple[EvalReport, EvalReport, TrainResult]:
    """Train on domain A; report A->A (in-domain) and A->B (out-domain) test EERs."""
    for split in ("train", "dev", "test"):
        for d in (domain_a, domain_b):
            if split not in d:
                raise DataFormatError(f"domain sets lack the {split!r} split")
    a1, a2 = domain_a["test"]
    b1, b2 = domain_b["test"]
    if a1.dim != b1.dim or (a2 is None) != (b2 is None) or (a2 is not None and a2.dim != b2.dim):
        raise ShapeError("domains have different embedding dims")
    model = build_model(spec)
    result = train(model, domain_a["train"], domain_a["dev"], config)
    name_a, name_b = names
    in_domain = evaluate(model, domain_a["test"], name_a, name_a)
    out_domain = evaluate(model, domain_b["test"], name_a, name_b)
    return in_domain, out_domain, result

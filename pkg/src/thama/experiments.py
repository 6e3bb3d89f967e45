"""Desk-scale experiment helpers shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from thama.data import SynthConfig, SyntheticData, generate_synthetic
from thama.metrics import compute_eer
from thama.models import ModelSpec, build_model
from thama.training import EvalReport, TrainConfig, TrainHistory, evaluate, train


@dataclass
class DeskRun:
    spec: ModelSpec
    report: EvalReport
    history: TrainHistory
    seconds: float


def synth_pair(syn: SyntheticData, domain: str, split: str, kind: str):
    v1, v2 = syn[domain][split]
    return (v1, None) if kind in ("fcn", "cnn") else (v1, v2)


def desk_run(kind: str, syn: SyntheticData, train_cfg: TrainConfig = TrainConfig(), domain="E", **spec_kw) -> DeskRun:
    """Train one model on ``domain`` of a synthetic draw and report in-domain test EER."""
    cfg = syn.config
    spec = ModelSpec(kind, cfg.d1, cfg.d2 if kind in ("concat", "thama") else None, **spec_kw)
    model = build_model(spec)
    start = time.perf_counter()
    result = train(model, synth_pair(syn, domain, "train", kind), synth_pair(syn, domain, "dev", kind), train_cfg)
    report = evaluate(model, synth_pair(syn, domain, "test", kind), domain, domain)
    return DeskRun(spec, report, result.history, time.perf_counter() - start)


def bayes_scores(syn: SyntheticData, domain: str, split: str) -> np.ndarray:
    """Posterior P(label = 1) under the generating model.

    With x = a*u + noise, P(a = +1 | x) = sigmoid(2 <x, u> / sigma^2), so the
    posterior of a*b > 0 is (1 + tanh(<x1,u>/s^2) tanh(<x2,v>/s^2)) / 2.
    """
    sigma2 = syn.config.sigma**2
    u, v = syn.directions[domain]
    x1, x2 = (s.vectors.astype(np.float64) for s in syn[domain][split])
    if sigma2 == 0:
        return (np.sign(x1 @ u) * np.sign(x2 @ v) > 0).astype(float)
    return 0.5 * (1.0 + np.tanh(x1 @ u / sigma2) * np.tanh(x2 @ v / sigma2))


def bayes_eer(syn: SyntheticData, domain: str = "E", split: str = "test") -> float:
    """EER (percent) of the optimal scorer on one split: a floor for any learned model."""
    return compute_eer(bayes_scores(syn, domain, split), syn[domain][split][0].labels)[0]


def population_bayes_eer(sigma: float, d: int = 64, n: int = 400_000, seed: int = 0) -> float:
    """Monte-Carlo estimate of the optimal EER on unlimited data."""
    syn = generate_synthetic(SynthConfig(d1=d, d2=d, n_train=1, n_dev=1, n_test=n, sigma=sigma, seed=seed, domains=("E",)))
    return bayes_eer(syn)

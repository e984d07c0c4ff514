"""Teacher-forced prediction, autoregressive generation and their metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import NormalizationRecord, SequenceDataset
from .gp import GPPosterior
from .model import AttentiveGP, compute_features


@dataclass
class GenerationResult:
    mean: np.ndarray        # (L,) or (n_seq, L)
    std: np.ndarray         # observation-space predictive std, same shape
    mode: str               # "prediction" | "generation"

    @property
    def two_sigma_lo(self) -> np.ndarray:
        return self.mean - 2.0 * self.std

    @property
    def two_sigma_hi(self) -> np.ndarray:
        return self.mean + 2.0 * self.std


class FeatureCache:
    """Training features and the GP factorization, computed once after training."""

    def __init__(self, model: AttentiveGP, train: SequenceDataset):
        self.model = model
        feats = model.features(train.inputs, train.targets).reshape(-1, model.cfg.F)
        self.posterior = GPPosterior(feats, train.targets.ravel(), model.hyp)

    @property
    def features(self) -> np.ndarray:
        return self.posterior.X


def _batch(x, y=None):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
        y = None if y is None else np.asarray(y, dtype=np.float64)[None]
    return x, y, single


def predict(cache: FeatureCache, x_seq, y_observed) -> GenerationResult:
    """Step t conditions on observed y_1..y_{t-1}; one causal pass covers all steps."""
    x, y, single = _batch(x_seq, y_observed)
    model = cache.model
    feats = compute_features(model.params, model.cfg, x, y)
    pd = cache.posterior.predict(feats.reshape(-1, model.cfg.F))
    mean = pd.mean.reshape(y.shape)
    std = np.sqrt(pd.obs_variance).reshape(y.shape)
    if single:
        mean, std = mean[0], std[0]
    return GenerationResult(mean, std, "prediction")


def generate(cache: FeatureCache, x_seq, sample: bool = False, seed: int = 0) -> GenerationResult:
    """Step t conditions on generated outputs for 1..t-1.

    The predictive mean is fed back by default; ``sample=True`` feeds back a
    seeded draw from the predictive distribution instead.
    """
    x, _, single = _batch(x_seq)
    model = cache.model
    B, L = x.shape[:2]
    rng = np.random.default_rng(seed)
    fed = np.zeros((B, L))
    mean = np.zeros((B, L))
    std = np.zeros((B, L))
    for t in range(L):
        feats = compute_features(model.params, model.cfg, x, fed)
        pd = cache.posterior.predict(feats[:, t, :])
        mean[:, t] = pd.mean
        std[:, t] = np.sqrt(pd.obs_variance)
        fed[:, t] = pd.mean if not sample else pd.mean + std[:, t] * rng.standard_normal(B)
    if single:
        mean, std = mean[0], std[0]
    return GenerationResult(mean, std, "generation")


def nrmse(pred_mean, targets) -> float:
    """RMSE divided by the target range (max - min)."""
    p = np.asarray(pred_mean, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape or t.size == 0:
        raise ValueError("nrmse needs equal-length, non-empty inputs")
    span = t.max() - t.min()
    if span == 0:
        raise ValueError("nrmse is undefined for constant targets")
    return float(np.sqrt(np.mean((p - t) ** 2)) / span)


def coverage_2sigma(result: GenerationResult, targets) -> float:
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != np.shape(result.mean):
        raise ValueError(f"targets {t.shape} vs result {np.shape(result.mean)}")
    inside = (t >= result.two_sigma_lo) & (t <= result.two_sigma_hi)
    return float(inside.mean())


# -- exports -----------------------------------------------------------------


def write_sequence_csv(path, targets, result: GenerationResult,
                       record: NormalizationRecord | None = None) -> None:
    """``t,target,mean,lo,hi`` for one sequence, in raw units when ``record`` is given."""
    tgt = np.asarray(targets, dtype=np.float64)
    mean, lo, hi = result.mean, result.two_sigma_lo, result.two_sigma_hi
    if record is not None:
        tgt, mean, lo, hi = (record.invert_targets(v) for v in (tgt, mean, lo, hi))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "target", "mean", "lo", "hi"])
        for i in range(len(tgt)):
            w.writerow([i + 1] + [repr(float(v[i])) for v in (tgt, mean, lo, hi)])


METRICS_HEADER = ["dataset", "mode", "nrmse", "coverage", "seed"]


def write_metrics_csv(path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r["dataset"], r["mode"], repr(float(r["nrmse"])),
                        repr(float(r["coverage"])), r["seed"]])


def evaluate(cache: FeatureCache, test: SequenceDataset, mode: str = "prediction"
             ) -> tuple[GenerationResult, float, float]:
    """Run one mode over every test window; returns (result, nrmse, coverage) pooled."""
    if mode == "prediction":
        res = predict(cache, test.inputs, test.targets)
    elif mode == "generation":
        res = generate(cache, test.inputs)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return res, nrmse(res.mean, test.targets), coverage_2sigma(res, test.targets)

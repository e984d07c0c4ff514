"""Block-wise and full-batch training, Adam, schedule checks and a descent monitor.

Block-wise training alternates two blocks per round: ``T1`` mini-batch steps
on the network weights with the GP hyperparameters frozen, then ``T2``
full-batch steps on the hyperparameters with the weights frozen.  During a
weight step the GP likelihood is the batch's own (batch-local) marginal
likelihood.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .data import SequenceDataset
from .gp import GPHyperparams, loss_graph
from .model import (AttentiveGP, as_vars, baseline_gaussian_head_forward, features, gaussian_nll,
                    init_baseline_head, shifted_outputs)

TRACE_HEADER = ["round", "loss", "grad_w_norm", "grad_theta_norm", "lr_w", "lr_theta", "seconds"]


@dataclass
class TrainConfig:
    T1: int | None = None       # None: one pass over the batches (n_seq / batch_size)
    T2: int = 1
    lr_W: float = 0.001
    lr_theta: float = 0.01
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 5
    schedule: str = "constant"  # constant | 1/k | 1/sqrt(k)
    gp_kind: str = "exact"
    u: int = 64

    def validate(self, n_seq: int | None = None) -> None:
        if self.T1 is not None and self.T1 < 1:
            raise ValueError("T1 must be >= 1")
        if self.T2 < 1:
            raise ValueError("T2 must be >= 1")
        if self.lr_W <= 0 or self.lr_theta <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or (n_seq is not None and self.batch_size > n_seq):
            raise ValueError(f"batch_size must be in [1, {n_seq}]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in types:
                raise KeyError(k)
            t = types[k]
            if k == "T1":
                out[k] = None if v in (None, "", "auto") else int(v)
            elif "int" in t:
                out[k] = int(v)
            elif "float" in t:
                out[k] = float(v)
            else:
                out[k] = str(v)
        return cls(**out)


# -- optimizers --------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns fresh arrays and a fresh state."""
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m.get(k, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, np.zeros_like(p)) + (1.0 - beta2) * (g * g)
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


def sgd_step(params, grads, state, lr, *_, **__):
    return {k: p - lr * grads[k] for k, p in params.items()}, state


def _step(cfg: TrainConfig) -> Callable:
    if cfg.optimizer == "adam":
        return lambda p, g, s, lr: adam_step(p, g, s, lr, cfg.beta1, cfg.beta2, cfg.eps)
    return lambda p, g, s, lr: sgd_step(p, g, s, lr)


# -- schedules ---------------------------------------------------------------

# name -> exponent p in lr_k = base / k**p
SCHEDULES = {"constant": 0.0, "1/k": 1.0, "1/sqrt(k)": 0.5}


def lr_at(base: float, schedule: str, k: int) -> float:
    """Learning rate for 1-based round ``k``."""
    return base / float(k) ** SCHEDULES[schedule]


@dataclass
class ScheduleReport:
    non_increasing: bool
    sum_diverges: bool
    squares_converge: bool

    @property
    def robbins_monro(self) -> bool:
        return self.non_increasing and self.sum_diverges and self.squares_converge


def _rule_report(rule, horizon: int) -> ScheduleReport:
    if isinstance(rule, tuple):
        schedule, base = rule
    else:
        schedule, base = rule, 1.0
    p = SCHEDULES[schedule]
    seq = np.array([lr_at(base, schedule, k) for k in range(1, horizon + 1)])
    non_inc = bool(np.all(np.diff(seq) <= 0))
    # p-series: sum k^-p diverges iff p <= 1; sum k^-2p converges iff 2p > 1
    return ScheduleReport(non_inc, p <= 1.0, 2.0 * p > 1.0)


def check_schedule(lrs_W, lrs_theta, horizon: int = 1000) -> dict[str, ScheduleReport]:
    """Check the Robbins-Monro conditions for both blocks.

    Each argument is a schedule name (``"constant"``, ``"1/k"``,
    ``"1/sqrt(k)"``) or a ``(name, base_lr)`` pair.  Divergence and
    convergence are decided at the rule level; ``horizon`` only bounds the
    monotonicity check.  A constant rate fails the convergent-squares test.
    """
    return {"W": _rule_report(lrs_W, horizon), "theta": _rule_report(lrs_theta, horizon)}


# -- traces ------------------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    loss: float
    grad_w_norm: float
    grad_theta_norm: float
    lr_w: float
    lr_theta: float
    seconds: float
    # descent-monitor ingredients
    sum_eta_gw2: float = 0.0
    sum_eta_gtheta2: float = 0.0
    sum_eta_w2: float = 0.0
    lipschitz: float = 0.0
    max_gw2: float = 0.0


@dataclass
class TrainTrace:
    trainer: str
    initial_loss: float
    rounds: list[RoundRecord] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.rounds])

    @property
    def final_loss(self) -> float:
        return self.rounds[-1].loss

    def rows(self, timing: bool = False) -> list[list[str]]:
        out = []
        for r in self.rounds:
            out.append([str(r.round)] + [repr(float(x)) for x in (
                r.loss, r.grad_w_norm, r.grad_theta_norm, r.lr_w, r.lr_theta,
                r.seconds if timing else 0.0)])
        return out


def write_trace_csv(trace: TrainTrace, path, timing: bool = False) -> None:
    """Write ``round,loss,grad_w_norm,grad_theta_norm,lr_w,lr_theta,seconds``.

    Floats use ``repr`` (shortest round-trip form).  Wall time is written only
    when ``timing`` is set; otherwise the column is 0 so reruns are byte-identical.
    """
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        w.writerows(trace.rows(timing))


def read_trace_csv(path) -> list[dict[str, float]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def epochs_to_reach(trace: TrainTrace, target: float, rel_tol: float = 0.0) -> int | None:
    """First 1-based round whose loss is <= target + rel_tol * |target|."""
    thresh = target + rel_tol * abs(target)
    hits = np.flatnonzero(trace.losses <= thresh)
    return int(hits[0]) + 1 if hits.size else None


# -- loss plumbing -----------------------------------------------------------


def _xy(data: SequenceDataset) -> tuple[np.ndarray, np.ndarray]:
    return data.inputs, data.targets


def _gp_leaves(tape: Tape, hyp: GPHyperparams):
    return tape.leaf(hyp.log_lengthscales, "gp.log_lengthscales"), tape.leaf(hyp.log_noise, "gp.log_noise")


def network_loss(model: AttentiveGP, x, y, cfg: TrainConfig, want_theta: bool = True):
    """Loss and gradients for a batch: returns (loss, grads_W, grads_theta)."""
    tape = Tape()
    p = as_vars(tape, model.params)
    log_ell, log_noise = _gp_leaves(tape, model.hyp)
    feats = features(tape, p, model.cfg, x, shifted_outputs(y))
    flat = ad.reshape(feats, (-1, model.cfg.F))
    loss = loss_graph(tape, flat, np.ravel(y), log_ell, log_noise, cfg.gp_kind, cfg.u)
    names = list(p)
    wrt = [p[k] for k in names] + ([log_ell, log_noise] if want_theta else [])
    grads = tape.gradient(loss, wrt)
    gW = dict(zip(names, grads[: len(names)]))
    gT = None
    if want_theta:
        gT = {"log_lengthscales": grads[-2], "log_noise": grads[-1]}
    return float(loss.value), gW, gT


def theta_loss(feats_flat: np.ndarray, y, hyp: GPHyperparams, cfg: TrainConfig):
    tape = Tape()
    log_ell, log_noise = _gp_leaves(tape, hyp)
    loss = loss_graph(tape, tape.constant(feats_flat), np.ravel(y), log_ell, log_noise,
                      cfg.gp_kind, cfg.u)
    g_ell, g_noise = tape.gradient(loss, [log_ell, log_noise])
    return float(loss.value), {"log_lengthscales": g_ell, "log_noise": g_noise}


def full_loss(model: AttentiveGP, data: SequenceDataset, cfg: TrainConfig) -> float:
    x, y = _xy(data)
    feats = model.features(x, y).reshape(-1, model.cfg.F)
    tape = Tape()
    log_ell, log_noise = _gp_leaves(tape, model.hyp)
    return float(loss_graph(tape, tape.constant(feats), np.ravel(y), log_ell, log_noise,
                            cfg.gp_kind, cfg.u).value)


def _theta_params(hyp: GPHyperparams) -> dict[str, np.ndarray]:
    return {"log_lengthscales": np.asarray(hyp.log_lengthscales, dtype=np.float64),
            "log_noise": np.asarray(hyp.log_noise, dtype=np.float64)}


def _hyp(theta: dict[str, np.ndarray]) -> GPHyperparams:
    return GPHyperparams(theta["log_lengthscales"], float(theta["log_noise"]))


def _sqnorm(grads: dict[str, np.ndarray]) -> float:
    return float(sum(np.sum(g * g) for g in grads.values()))


def _flat(d: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(v) for v in d.values()])


def _ratio(g_new, g_old, p_new, p_old) -> float:
    dp = np.linalg.norm(_flat(p_new) - _flat(p_old))
    if dp == 0.0:
        return 0.0
    return float(np.linalg.norm(_flat(g_new) - _flat(g_old)) / dp)


class RoundError(RuntimeError):
    def __init__(self, round_index: int, cause: Exception):
        super().__init__(f"round {round_index}: {cause}")
        self.round_index = round_index
        self.cause = cause


# -- trainers ----------------------------------------------------------------


def blockwise_train(model: AttentiveGP, data: SequenceDataset, cfg: TrainConfig,
                    callback: Callable[[RoundRecord], None] | None = None
                    ) -> tuple[AttentiveGP, TrainTrace]:
    """Alternate ``T1`` mini-batch weight steps and ``T2`` full-batch GP steps per round.

    ``data`` must hold only normalized training windows.  Batches are drawn
    without replacement from an epoch-wise shuffle seeded by ``cfg.seed``.
    """
    x, y = _xy(data)
    n = len(x)
    cfg.validate(n)
    rng = np.random.default_rng(cfg.seed)
    n_batches = math.ceil(n / cfg.batch_size)
    T1 = cfg.T1 or n_batches
    step = _step(cfg)
    model = model.copy()
    theta = _theta_params(model.hyp)
    sW, sT = AdamState(), AdamState()
    queue: list[np.ndarray] = []

    def next_batch():
        if not queue:
            perm = rng.permutation(n)
            queue.extend(perm[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size))
        return np.sort(queue.pop(0))

    trace = TrainTrace("blockwise", full_loss(model, data, cfg))
    prev_gW = prev_W = None
    for k in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr_w = lr_at(cfg.lr_W, cfg.schedule, k)
        lr_t = lr_at(cfg.lr_theta, cfg.schedule, k)
        rec = RoundRecord(k, 0.0, 0.0, 0.0, lr_w, lr_t if k > cfg.warmup else 0.0, 0.0)
        gw2 = []
        try:
            for _ in range(T1):
                b = next_batch()
                _, gW, _ = network_loss(model, x[b], y[b], cfg, want_theta=False)
                g2 = _sqnorm(gW)
                gw2.append(g2)
                rec.sum_eta_gw2 += lr_w * g2
                rec.sum_eta_w2 += lr_w**2
                rec.max_gw2 = max(rec.max_gw2, g2)
                if prev_gW is not None:
                    rec.lipschitz = max(rec.lipschitz, _ratio(gW, prev_gW, model.params, prev_W))
                prev_gW, prev_W = gW, model.params
                model.params, sW = step(model.params, gW, sW, lr_w)
            feats = model.features(x, y).reshape(-1, model.cfg.F)
            gt2 = []
            if k > cfg.warmup:
                prev = None
                for _ in range(cfg.T2):
                    _, gT = theta_loss(feats, y, _hyp(theta), cfg)
                    g2 = _sqnorm(gT)
                    gt2.append(g2)
                    rec.sum_eta_gtheta2 += lr_t * g2
                    if prev is not None:
                        rec.lipschitz = max(rec.lipschitz, _ratio(gT, prev[0], theta, prev[1]))
                    prev = (gT, theta)
                    theta, sT = step(theta, gT, sT, lr_t)
                model.hyp = _hyp(theta)
            rec.loss, _ = theta_loss(feats, y, model.hyp, cfg)
        except ad.ConditioningError as e:
            raise RoundError(k, e) from e
        rec.grad_w_norm = float(np.sqrt(np.mean(gw2)))
        rec.grad_theta_norm = float(np.sqrt(np.mean(gt2))) if gt2 else 0.0
        rec.seconds = time.perf_counter() - t0
        trace.rounds.append(rec)
        if callback:
            callback(rec)
    return model, trace


def fullbatch_train(model: AttentiveGP, data: SequenceDataset, cfg: TrainConfig,
                    callback: Callable[[RoundRecord], None] | None = None
                    ) -> tuple[AttentiveGP, TrainTrace]:
    """One joint Adam step on weights and GP hyperparameters per epoch.

    The loss logged for epoch k is the full-batch loss after its update (read
    off the next epoch's forward pass, plus one final evaluation).
    """
    x, y = _xy(data)
    cfg.validate(len(x))
    step = _step(cfg)
    model = model.copy()
    theta = _theta_params(model.hyp)
    sW, sT = AdamState(), AdamState()
    trace = None
    pending: RoundRecord | None = None
    prev = None
    for k in range(1, cfg.epochs + 2):
        t0 = time.perf_counter()
        try:
            loss, gW, gT = network_loss(model, x, y, cfg)
        except ad.ConditioningError as e:
            raise RoundError(k, e) from e
        if trace is None:
            trace = TrainTrace("fullbatch", loss)
        if pending is not None:
            pending.loss = loss
            pending.seconds += time.perf_counter() - t0
            trace.rounds.append(pending)
            if callback:
                callback(pending)
        if k == cfg.epochs + 1:
            break
        lr_w = lr_at(cfg.lr_W, cfg.schedule, k)
        lr_t = lr_at(cfg.lr_theta, cfg.schedule, k)
        update_theta = k > cfg.warmup
        gw2, gt2 = _sqnorm(gW), _sqnorm(gT)
        rec = RoundRecord(k, 0.0, float(np.sqrt(gw2)), float(np.sqrt(gt2)) if update_theta else 0.0,
                          lr_w, lr_t if update_theta else 0.0, 0.0,
                          sum_eta_gw2=lr_w * gw2, sum_eta_gtheta2=lr_t * gt2 if update_theta else 0.0,
                          sum_eta_w2=lr_w**2, max_gw2=gw2)
        if prev is not None:
            rec.lipschitz = _ratio({**gW, **gT}, prev[0], {**model.params, **theta}, prev[1])
        prev = ({**gW, **gT}, {**model.params, **theta})
        model.params, sW = step(model.params, gW, sW, lr_w)
        if update_theta:
            theta, sT = step(theta, gT, sT, lr_t)
            model.hyp = _hyp(theta)
        rec.seconds = time.perf_counter() - t0
        pending = rec
    return model, trace


# -- descent monitor ---------------------------------------------------------


def estimate_constants(trace: TrainTrace) -> tuple[float, float]:
    """Plug-in (Lipschitz, variance) constants: max observed gradient-change
    ratio and max observed squared stochastic-gradient norm."""
    L = max((r.lipschitz for r in trace.rounds), default=0.0)
    M = max((r.max_gw2 for r in trace.rounds), default=0.0)
    return L, M


@dataclass
class DescentReport:
    observed: np.ndarray        # loss change per round
    bound: np.ndarray           # sufficient-descent right-hand side per round
    window_ok: np.ndarray       # per trailing window: mean(observed) <= mean(bound)

    @property
    def fraction_ok(self) -> float:
        return float(self.window_ok.mean()) if self.window_ok.size else 1.0

    @property
    def failures(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(~self.window_ok)]


def descent_monitor(trace: TrainTrace, L_const: float | None = None, M_const: float | None = None,
                    window: int = 10) -> DescentReport:
    """Compare per-round loss change with the sufficient-descent bound

        -1/2 sum eta_theta |g_theta|^2 - 1/2 sum eta_W |g_W|^2 + 1/2 L M sum eta_W^2

    averaged over sliding windows of ``window`` rounds.
    """
    if len(trace.rounds) < 2:
        raise ValueError("descent_monitor needs at least two rounds")
    if L_const is None or M_const is None:
        L_est, M_est = estimate_constants(trace)
        L_const = L_est if L_const is None else L_const
        M_const = M_est if M_const is None else M_const
    losses = np.concatenate([[trace.initial_loss], trace.losses])
    observed = np.diff(losses)
    bound = np.array([-0.5 * r.sum_eta_gtheta2 - 0.5 * r.sum_eta_gw2
                      + 0.5 * L_const * M_const * r.sum_eta_w2 for r in trace.rounds])
    w = min(window, len(observed))
    kern = np.ones(w) / w
    obs_s = np.convolve(observed, kern, mode="valid")
    bnd_s = np.convolve(bound, kern, mode="valid")
    tol = 1e-12 * (1.0 + np.abs(bnd_s))
    return DescentReport(observed, bound, obs_s <= bnd_s + tol)


# -- Gaussian-head baseline --------------------------------------------------


def _baseline_graph(params, head, cfg_model, x, y):
    tape = Tape()
    p = as_vars(tape, {**params, **head})
    feats = features(tape, p, cfg_model, x, shifted_outputs(y))
    mean, log_var = baseline_gaussian_head_forward(feats, p)
    return tape, p, mean, log_var


def baseline_train(model: AttentiveGP, data: SequenceDataset, cfg: TrainConfig,
                   head: dict[str, np.ndarray] | None = None
                   ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], np.ndarray]:
    """Full-batch Adam on the same network topped by a Gaussian head.

    Returns (weights, head, per-epoch losses).  The GP hyperparameters of
    ``model`` are ignored.
    """
    x, y = _xy(data)
    cfg.validate(len(x))
    step = _step(cfg)
    params = {k: v.copy() for k, v in model.params.items()}
    head = init_baseline_head(model.cfg, cfg.seed) if head is None else dict(head)
    sW, sH = AdamState(), AdamState()
    losses = []
    for k in range(1, cfg.epochs + 1):
        tape, p, mean, log_var = _baseline_graph(params, head, model.cfg, x, y)
        loss = gaussian_nll(mean, log_var, y)
        names = list(p)
        grads = dict(zip(names, tape.gradient(loss, [p[n] for n in names])))
        lr = lr_at(cfg.lr_W, cfg.schedule, k)
        params, sW = step(params, {n: grads[n] for n in params}, sW, lr)
        head, sH = step(head, {n: grads[n] for n in head}, sH, lr)
        losses.append(float(loss.value))
    return params, head, np.asarray(losses)


def baseline_predict(params, head, cfg_model, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced mean and std of the Gaussian head, each shaped like ``y``."""
    _, _, mean, log_var = _baseline_graph(params, head, cfg_model, np.asarray(x, dtype=np.float64),
                                          np.asarray(y, dtype=np.float64))
    shape = np.shape(y)
    return mean.value.reshape(shape), np.exp(0.5 * log_var.value).reshape(shape)

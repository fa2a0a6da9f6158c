"""Recovery after detection: adversarial elimination (FAUN) and two baselines.

FAUN keeps each detected client's last few uploads, averages them into one
representative update, and pushes that update towards its worst case on a
clean proxy set with l2-constrained projected gradient ascent. For the first
``eliminate_rounds`` unlearning rounds the aggregated worst-case update is
subtracted from the global model on top of an ordinary FedAvg step over the
retained clients; afterwards training continues as plain fine-tuning.

Sign convention: stored uploads are server pseudo-gradients
``(global - local) / server_lr``. The representative malicious update is
taken as a displacement ``local - global``, i.e. the negated window mean, so
that subtracting it moves the model away from where the detected clients
were pulling it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import fl as flsim
from .data import ProxyDataset
from .errors import ConfigError, NumericalError
from .model import ModelSpec, l2_norm, loss_and_gradient, project_l2_ball
from .seeding import PHASE_CALIBRATE, PHASE_UNLEARN, rng

TRACE_COLUMNS = ("t", "client_id", "delta_norm", "proxy_loss_pre", "proxy_loss_post", "gbar_norm", "lambda")


@dataclass(frozen=True)
class FaunConfig:
    epsilon: float = 1.0
    pgd_steps: int = 30
    pgd_step_size: float = 0.05
    window: int = 10
    eliminate_rounds: int = 10
    total_unlearn_rounds: int = 50

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0", "faun.epsilon")
        if self.pgd_steps < 1:
            raise ConfigError("pgd_steps must be >= 1", "faun.pgd_steps")
        if not self.pgd_step_size > 0:
            raise ConfigError("pgd_step_size must be > 0", "faun.pgd_step_size")
        if self.window < 1:
            raise ConfigError("window must be >= 1", "faun.window")
        if not 0 <= self.eliminate_rounds <= self.total_unlearn_rounds:
            raise ConfigError("need 0 <= eliminate_rounds <= total_unlearn_rounds", "faun.eliminate_rounds")


@dataclass(frozen=True)
class FedEraserConfig:
    calibration_period: int = 2
    calibration_ratio: float = 0.5

    def __post_init__(self):
        if self.calibration_period < 1:
            raise ConfigError("calibration_period must be >= 1", "federaser.calibration_period")
        if not 0 < self.calibration_ratio <= 1:
            raise ConfigError("calibration_ratio must lie in (0, 1]", "federaser.calibration_ratio")


@dataclass
class PGDResult:
    delta: np.ndarray
    loss_start: float
    loss_best: float
    best_step: int
    losses: list[float] = field(default_factory=list)


@dataclass
class EliminationTrace:
    rows: list[dict] = field(default_factory=list)

    def add_client(self, t, client_id, delta_norm, loss_pre, loss_post):
        self.rows.append({"t": t, "client_id": client_id, "delta_norm": delta_norm,
                          "proxy_loss_pre": loss_pre, "proxy_loss_post": loss_post,
                          "gbar_norm": None, "lambda": 1})

    def close_round(self, t, lam, gbar_norm):
        if lam == 0:
            self.rows.append({"t": t, "client_id": None, "delta_norm": None, "proxy_loss_pre": None,
                              "proxy_loss_post": None, "gbar_norm": 0.0, "lambda": 0})
            return
        for row in self.rows:
            if row["t"] == t:
                row["gbar_norm"] = gbar_norm

    def delta_norms(self) -> list[float]:
        return [r["delta_norm"] for r in self.rows if r["lambda"] == 1]

    def elimination_rounds(self) -> list[int]:
        return sorted({r["t"] for r in self.rows if r["lambda"] == 1 and r["gbar_norm"]})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for row in self.rows:
                writer.writerow(["" if row[c] is None else _fmt(row[c]) for c in TRACE_COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


class ProxyObjective:
    """Mean cross-entropy on the proxy set, as ``w -> (loss, gradient)``."""

    def __init__(self, spec: ModelSpec, proxy: ProxyDataset):
        if proxy.size == 0:
            raise ConfigError("the proxy dataset is empty", "dataset.proxy_size")
        self.spec = spec
        self.features = proxy.batch.features
        self.labels = proxy.batch.labels

    def __call__(self, w):
        loss, grad = loss_and_gradient(w, self.spec, self.features, self.labels)
        return float(loss), grad


def intra_client_average(window: flsim.UpdateWindow) -> np.ndarray:
    if len(window) == 0:
        raise ConfigError(f"update window of client {window.client_id} is empty")
    return np.mean(np.stack([g for _, g in window.entries]), axis=0)


def pgd_maximize(w_hat, gbar, objective, epsilon, steps, step_size) -> PGDResult:
    """Projected gradient ascent on ``delta -> objective(w_hat - gbar - delta)`` over ``||delta|| <= epsilon``.

    Steps are taken along the unit-normalized ascent direction, starting from
    ``delta = 0``. The best iterate seen is returned, so the loss at the
    returned perturbation is never below the loss at zero.
    """
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0", "faun.epsilon")
    base = w_hat - gbar
    delta = np.zeros_like(base)
    best, best_loss, best_step = delta, None, 0
    losses = []
    for k in range(steps + 1):
        loss, grad = objective(base - delta)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite proxy loss at PGD step {k}")
        losses.append(loss)
        if best_loss is None or loss > best_loss:
            best, best_loss, best_step = delta, loss, k
        if k == steps:
            break
        # d/d(delta) of L(base - delta) is -grad
        norm = l2_norm(grad)
        if norm == 0.0:
            break
        delta = project_l2_ball(delta - (step_size / norm) * grad, epsilon)
    return PGDResult(best, losses[0], best_loss, best_step, losses)


def elimination_update(w_hat, windows, cfg: FaunConfig, objective, t=0, trace=None):
    """Aggregate ``mean_i(gbar_i + delta_i)`` over the detected clients, in id order.

    ``gbar_i`` is the negated window mean (see the module docstring), so
    ``w_hat - gbar_i`` undoes the client's average pull and ``delta_i`` pushes
    further towards high proxy loss.
    """
    if not windows:
        raise ConfigError("no detected clients: nothing to unlearn")
    adversarial = []
    for cid in sorted(windows):
        gbar = -intra_client_average(windows[cid])
        res = pgd_maximize(w_hat, gbar, objective, cfg.epsilon, cfg.pgd_steps, cfg.pgd_step_size)
        adversarial.append(gbar + res.delta)
        if trace is not None:
            trace.add_client(t, cid, l2_norm(res.delta), res.loss_start, res.loss_best)
    return np.mean(np.stack(adversarial), axis=0)


def lambda_schedule(t, eliminate_rounds) -> int:
    if t < 0:
        raise ConfigError("round index must be >= 0")
    return 1 if 0 <= t < eliminate_rounds else 0


def faun_unlearn(poisoned_model, windows, retained_clients, cfg: FaunConfig, fl: flsim.FLConfig,
                 spec: ModelSpec, proxy: ProxyDataset, seed, *, objective=None, on_round=None):
    """Return ``(recovered_model, trace)``.

    Round ``t`` applies ``w - server_lr * FedAvg(retained) - lambda_t * gstar_t``
    where ``gstar_t`` is recomputed against the current model.
    ``on_round(t, model, phase)`` is called after every round.
    """
    if not retained_clients:
        raise ConfigError("no retained clients")
    if not windows:
        raise ConfigError("no detected clients: nothing to unlearn")
    objective = ProxyObjective(spec, proxy) if objective is None else objective
    trace = EliminationTrace()
    model = poisoned_model
    for t in range(cfg.total_unlearn_rounds):
        lam = lambda_schedule(t, cfg.eliminate_rounds)
        stepped = flsim.fedavg_round(model, retained_clients, spec, fl, seed, PHASE_UNLEARN, t)
        if lam:
            gstar = elimination_update(model, windows, cfg, objective, t, trace)
            stepped = stepped - lam * gstar
            trace.close_round(t, lam, l2_norm(gstar))
        else:
            trace.close_round(t, lam, 0.0)
        model = stepped
        if on_round is not None:
            on_round(t, model, "unlearn_eliminate" if lam else "unlearn_finetune")
    return model, trace


def retrain_from_scratch(retained_clients, spec, fl: flsim.FLConfig, seed, *, rounds=None, on_round=None):
    """Fresh initialization trained on the retained clients only."""
    if not retained_clients:
        raise ConfigError("no retained clients")
    result = flsim.run_training(retained_clients, spec, fl, seed, rounds=rounds,
                                on_round=None if on_round is None else lambda r, m, u: on_round(r, m))
    return result.model


def calibrate(historical, fresh):
    """Rescale ``fresh`` to the norm of ``historical``; a zero ``fresh`` stays zero."""
    norm = l2_norm(fresh)
    if norm == 0.0:
        return np.zeros_like(fresh)
    return (l2_norm(historical) / norm) * fresh


def federaser_unlearn(checkpoint_models, historical_updates, retained_clients, cfg: FedEraserConfig,
                      fl: flsim.FLConfig, spec, seed, *, on_round=None):
    """Replay the sampled training rounds with norm-calibrated fresh updates.

    ``checkpoint_models`` maps a sampled round to the global model at its start
    (only the earliest is used, as the starting point); ``historical_updates``
    maps it to ``{client_id: update}`` for the retained clients.
    """
    if not retained_clients:
        raise ConfigError("no retained clients")
    if not historical_updates:
        raise ConfigError("FedEraser needs stored calibration history")
    last = max(historical_updates)
    sampled = list(range(1, last + 1, cfg.calibration_period))
    missing = [r for r in sampled if r not in historical_updates]
    if missing:
        raise ConfigError(f"missing calibration history for rounds {missing}")
    model = checkpoint_models[sampled[0]]
    epochs = max(1, int(round(fl.local_epochs * cfg.calibration_ratio)))
    clients = sorted(retained_clients, key=lambda c: c.id)
    for j, r in enumerate(sampled):
        updates = []
        for c in clients:
            if c.id not in historical_updates[r]:
                raise ConfigError(f"missing calibration history for client {c.id} in round {r}")
            fresh = flsim.local_update(c, model, spec, epochs, fl.batch_size, fl.lr, fl.momentum,
                                       rng(seed, "batch", PHASE_CALIBRATE, j, c.id), fl.server_lr)
            updates.append(calibrate(historical_updates[r][c.id], fresh))
        model = flsim.server_step(model, updates, fl.server_lr)
        if on_round is not None:
            on_round(j, model)
    return model

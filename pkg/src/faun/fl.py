"""Federated training loop: local SGD, FedAvg, server step and update history.

Client updates are pseudo-gradients ``(global - local_final) / server_lr`` so
that the server rule ``w <- w - server_lr * mean(updates)`` reproduces local
training exactly when there is a single client.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import attacks
from .data import ExampleBatch
from .errors import ConfigError
from .model import ModelSpec, OptimizerState, check_dim, loss_and_gradient, sgd_step
from .seeding import PHASE_TRAIN, PHASE_UNLEARN, rng

BENIGN = "benign"
MALICIOUS = "malicious"


@dataclass(frozen=True)
class FLConfig:
    num_clients: int = 20
    num_malicious: int = 6
    rounds: int = 60
    local_epochs: int = 5
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    server_lr: float = 1.0
    partition: str = "iid"
    alpha: float = 0.5


@dataclass
class ClientRecord:
    id: int
    shard: ExampleBatch
    role: str = BENIGN
    attack: attacks.AttackSpec | None = None
    # backdoor clients train on this copy; materialized once at setup
    poisoned_shard: ExampleBatch | None = field(default=None, repr=False)

    @property
    def is_malicious(self) -> bool:
        return self.role == MALICIOUS


class UpdateWindow:
    """Ring buffer of the last ``capacity`` updates uploaded by one client."""

    def __init__(self, client_id: int, capacity: int):
        if capacity < 1:
            raise ConfigError("window capacity must be >= 1", "faun.window")
        self.client_id = client_id
        self.capacity = capacity
        self.entries: deque[tuple[int, np.ndarray]] = deque(maxlen=capacity)

    def append(self, round_index: int, update: np.ndarray) -> None:
        if self.entries and round_index <= self.entries[-1][0]:
            raise ValueError("window rounds must be strictly increasing")
        self.entries.append((round_index, update))

    @property
    def rounds(self) -> list[int]:
        return [r for r, _ in self.entries]

    def __len__(self):
        return len(self.entries)


class HistoryStore:
    """Server-side record of client uploads.

    Every client's last ``window`` updates are buffered until detection, when
    :meth:`detect` keeps only the flagged clients. Calibration history for the
    FedEraser baseline is kept only if ``calibration_period`` is set.
    """

    def __init__(self, window: int, calibration_period: int | None = None, retained=()):
        self.window = window
        self.windows: dict[int, UpdateWindow] = {}
        self.calibration_period = calibration_period
        self.retained = set(retained)
        self.checkpoints: dict[int, np.ndarray] = {}
        self.calibration: dict[int, dict[int, np.ndarray]] = {}

    def record(self, round_index: int, model_before: np.ndarray, updates: dict[int, np.ndarray]):
        for cid in sorted(updates):
            if cid not in self.windows:
                self.windows[cid] = UpdateWindow(cid, self.window)
            self.windows[cid].append(round_index, updates[cid])
        if self.calibration_period and (round_index - 1) % self.calibration_period == 0:
            self.checkpoints[round_index] = model_before
            self.calibration[round_index] = {c: updates[c] for c in sorted(updates) if c in self.retained}

    def detect(self, malicious_ids) -> dict[int, UpdateWindow]:
        malicious_ids = set(malicious_ids)
        self.windows = {c: w for c, w in self.windows.items() if c in malicious_ids}
        return dict(self.windows)

    def stored_vectors(self) -> int:
        total = sum(len(w) for w in self.windows.values())
        total += sum(len(u) for u in self.calibration.values()) + len(self.checkpoints)
        return total


@dataclass
class TrainingResult:
    model: np.ndarray
    windows: dict[int, UpdateWindow]
    history: HistoryStore


def local_displacement(shard: ExampleBatch, global_params, spec: ModelSpec, epochs, batch_size,
                       lr, momentum, gen: np.random.Generator) -> np.ndarray:
    """Run mini-batch SGD with momentum from ``global_params``; return ``global - local_final``.

    Training is carried out on the displacement ``d`` with ``w = global - d``, so
    the locally trained model is by definition ``global - d``.
    """
    disp = np.zeros_like(global_params)
    state = OptimizerState.zeros(disp.size, lr, momentum)
    n = len(shard)
    feats, labels = shard.features, shard.labels
    for _ in range(epochs):
        order = gen.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            _, grad = loss_and_gradient(global_params - disp, spec, feats[rows], labels[rows])
            # d moves along +grad exactly when w = global - d moves along -grad
            disp = sgd_step(disp, -grad, state)
    return disp


def local_train(shard, global_params, spec, epochs, batch_size, lr, momentum, seed) -> np.ndarray:
    """The locally trained model itself (for tests and diagnostics)."""
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return global_params - local_displacement(shard, global_params, spec, epochs, batch_size, lr, momentum, gen)


def local_update(client: ClientRecord, global_params, spec, epochs, batch_size, lr, momentum,
                 seed, server_lr=1.0, shard=None) -> np.ndarray:
    shard = client.shard if shard is None else shard
    if len(shard) == 0:
        raise ConfigError(f"client {client.id} has an empty shard")
    check_dim(global_params, spec.num_params)
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    disp = local_displacement(shard, global_params, spec, epochs, batch_size, lr, momentum, gen)
    return disp / server_lr


def client_update(client: ClientRecord, global_params, spec, fl: FLConfig, gen) -> np.ndarray:
    if client.poisoned_shard is not None:
        return attacks.backdoor_local_update(client, global_params, spec, fl.local_epochs,
                                             fl.batch_size, fl.lr, fl.momentum, gen, fl.server_lr)
    return local_update(client, global_params, spec, fl.local_epochs, fl.batch_size, fl.lr,
                        fl.momentum, gen, fl.server_lr)


def fedavg(updates) -> np.ndarray:
    """Unweighted coordinate-wise mean of the updates."""
    updates = list(updates)
    if not updates:
        raise ConfigError("cannot aggregate an empty update list")
    dim = updates[0].shape[-1]
    for u in updates:
        check_dim(u, dim)
    return np.mean(np.stack(updates), axis=0)


def server_step(global_params, updates, eta) -> np.ndarray:
    return global_params - eta * fedavg(updates)


def fedavg_round(model, clients, spec, fl: FLConfig, seed, stream, round_index) -> np.ndarray:
    """One plain FedAvg round over ``clients`` (benign behaviour, canonical id order)."""
    updates = [
        client_update(c, model, spec, fl, rng(seed, "batch", stream, round_index, c.id))
        for c in sorted(clients, key=lambda c: c.id)
    ]
    return server_step(model, updates, fl.server_lr)


def run_training(clients, spec: ModelSpec, fl: FLConfig, seed, *, attack=None, window=10,
                 rounds=None, initial_model=None, stream=PHASE_TRAIN, calibration_period=None,
                 on_round=None) -> TrainingResult:
    """Run ``rounds`` FedAvg rounds with malicious clients applying ``attack``.

    ``on_round(r, model, updates)`` is called after each server step with the
    1-based round number. The returned windows cover malicious clients only.
    """
    clients = sorted(clients, key=lambda c: c.id)
    ids = [c.id for c in clients]
    if len(set(ids)) != len(ids):
        raise ConfigError("client ids must be unique")
    rounds = fl.rounds if rounds is None else rounds
    model = spec.init_params(rng(seed, "init")) if initial_model is None else initial_model.copy()
    benign = [c for c in clients if not c.is_malicious]
    malicious = [c for c in clients if c.is_malicious]
    trim = attack is not None and attack.kind == "trim" and malicious
    store = HistoryStore(window, calibration_period, retained=[c.id for c in benign])

    for r in range(1, rounds + 1):
        updates = {}
        for c in clients:
            if trim and c.is_malicious:
                continue
            updates[c.id] = client_update(c, model, spec, fl, rng(seed, "batch", stream, r - 1, c.id))
        if trim:
            crafted = attacks.craft_trim_updates(
                [updates[c.id] for c in benign], len(malicious), attack.trim_scale,
                rng=rng(seed, "attack", r - 1), jitter=attack.jitter,
            )
            for c, g in zip(malicious, crafted):
                updates[c.id] = g
        before = model
        model = server_step(model, [updates[i] for i in ids], fl.server_lr)
        store.record(r, before, updates)
        if on_round is not None:
            on_round(r, model, updates)

    windows = store.detect([c.id for c in malicious])
    return TrainingResult(model, windows, store)


def run_finetune(model, retained_clients, rounds, spec, fl: FLConfig, seed, *,
                 stream=PHASE_UNLEARN, on_round=None) -> np.ndarray:
    """Plain FedAvg rounds over the retained clients, starting from ``model``."""
    if not retained_clients:
        raise ConfigError("no retained clients to fine-tune with")
    for t in range(rounds):
        model = fedavg_round(model, retained_clients, spec, fl, seed, stream, t)
        if on_round is not None:
            on_round(t, model)
    return model

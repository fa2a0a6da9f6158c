"""Malicious client behaviours: a directed Trim-style attack and a pixel backdoor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fl
from .data import TriggerSpec, poison_backdoor
from .errors import ConfigError

KINDS = ("none", "trim", "backdoor")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    trim_scale: float = 1.5
    jitter: float = 0.01
    poison_ratio: float = 0.1
    trigger: TriggerSpec = field(default_factory=TriggerSpec)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}", "attack.kind")
        if self.kind == "trim" and not self.trim_scale >= 0:
            raise ConfigError("trim_scale must be >= 0", "attack.trim_scale")
        if self.kind == "backdoor" and not 0 < self.poison_ratio <= 1:
            raise ConfigError("poison_ratio must lie in (0, 1]", "attack.poison_ratio")


def craft_trim_updates(benign_updates, num_malicious, trim_scale, rng=None, jitter=0.01):
    """Updates that push the aggregate against the benign descent direction.

    Each malicious update is ``-(mu + trim_scale * sigma * sign(mu))`` plus
    ``jitter * sigma`` Gaussian noise, where ``mu`` and ``sigma`` are the
    coordinate-wise mean and standard deviation of the benign updates.
    """
    if len(benign_updates) == 0:
        raise ConfigError("the trim attack needs at least one benign update")
    stacked = np.stack(benign_updates)
    mu = stacked.mean(axis=0)
    sigma = stacked.std(axis=0)
    direction = -(mu + trim_scale * sigma * np.sign(mu))
    out = []
    for _ in range(num_malicious):
        if jitter and rng is not None:
            out.append(direction + jitter * sigma * rng.standard_normal(mu.shape))
        else:
            out.append(direction.copy())
    return out


def poison_client(client, attack: AttackSpec, seed) -> None:
    """Materialize the fixed poisoned shard of a backdoor client."""
    client.attack = attack
    if attack.kind != "backdoor":
        return
    client.poisoned_shard = poison_backdoor(client.shard, attack.poison_ratio, attack.trigger, seed)


def backdoor_local_update(client, global_params, spec, epochs, batch_size, lr, momentum, seed,
                          server_lr=1.0):
    shard = client.shard if client.poisoned_shard is None else client.poisoned_shard
    return fl.local_update(client, global_params, spec, epochs, batch_size, lr, momentum, seed,
                           server_lr, shard=shard)

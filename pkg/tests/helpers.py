"""Shared builders for the test suite."""

import numpy as np

from faun import attacks
from faun.data import make_synthetic, partition
from faun.fl import BENIGN, MALICIOUS, ClientRecord
from faun.model import ModelSpec


def make_clients(num_clients=6, malicious=(), n=240, side=4, attack=None, seed=0, separation=4.0):
    """A tiny image-shaped federation for fast end-to-end checks."""
    data = make_synthetic(4, side * side, n, separation, seed, noise_std=0.2,
                          image_shape=(side, side), background=0.3)
    plan = partition(data, num_clients, "iid", seed=seed + 1)
    clients = []
    for cid, shard in enumerate(plan.shards(data)):
        c = ClientRecord(cid, shard, MALICIOUS if cid in malicious else BENIGN)
        if c.is_malicious and attack is not None:
            attacks.poison_client(c, attack, [seed, cid])
        clients.append(c)
    return ModelSpec(side * side, (6,), 4), clients, data

"""Clean accuracy, backdoor attack success rate and membership inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import ExampleBatch, TriggerSpec, stamp_trigger_all
from .errors import DataError
from .model import ModelSpec, per_example_loss, predict


@dataclass
class MetricsRecord:
    round: int
    phase: str
    acc: float
    ma: float | None = None
    asr: float | None = None
    misr: float | None = None
    mean_loss: float | None = None
    elapsed_ms: float | None = None

    def to_dict(self, timing=True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("elapsed_ms")
        return d


def accuracy(model, spec: ModelSpec, test: ExampleBatch) -> float:
    if len(test) == 0:
        raise DataError("accuracy is undefined on an empty test set")
    return float(np.mean(predict(model, spec, test.features) == test.labels))


def triggered_test_set(clean_test: ExampleBatch, trigger: TriggerSpec) -> ExampleBatch:
    """Triggered copies of every test example whose true label is not the target."""
    keep = np.flatnonzero(clean_test.labels != trigger.target_class)
    if keep.size == 0:
        raise DataError("every test example already carries the target label; ASR is undefined")
    return stamp_trigger_all(clean_test.subset(keep), trigger)


def attack_success_rate(model, spec: ModelSpec, clean_test: ExampleBatch, trigger: TriggerSpec,
                        triggered: ExampleBatch | None = None) -> float:
    if triggered is None:
        triggered = triggered_test_set(clean_test, trigger)
    return float(np.mean(predict(model, spec, triggered.features) == trigger.target_class))


def balanced_subsample(members, nonmembers, rng: np.random.Generator):
    """Subsample the larger of two arrays to the size of the smaller."""
    n = min(len(members), len(nonmembers))
    if len(members) > n:
        members = members[np.sort(rng.choice(len(members), n, replace=False))]
    if len(nonmembers) > n:
        nonmembers = nonmembers[np.sort(rng.choice(len(nonmembers), n, replace=False))]
    return members, nonmembers


def threshold_attack_accuracy(member_losses, nonmember_losses) -> float:
    """Best balanced accuracy of the rule "member iff loss < tau" over all thresholds.

    Candidate thresholds are the midpoints between consecutive distinct pooled
    losses plus the two degenerate ones, so the result is always >= 0.5.
    """
    m = np.sort(np.asarray(member_losses, dtype=np.float64))
    nm = np.sort(np.asarray(nonmember_losses, dtype=np.float64))
    if m.size == 0 or nm.size == 0:
        raise DataError("membership inference needs non-empty member and non-member sets")
    cuts = np.unique(np.concatenate([m, nm]))
    # "below the midpoint after cuts[j]" means "<= cuts[j]"
    tpr = np.searchsorted(m, cuts, side="right") / m.size
    fpr = np.searchsorted(nm, cuts, side="right") / nm.size
    best = float(np.max(0.5 * (tpr + 1.0 - fpr)))
    return max(best, 0.5)


def membership_inference_sr(model, spec: ModelSpec, member_set: ExampleBatch,
                            nonmember_set: ExampleBatch, seed=0) -> float:
    """Loss-threshold membership inference success rate (raw balanced accuracy)."""
    if len(member_set) == 0 or len(nonmember_set) == 0:
        raise DataError("membership inference needs non-empty member and non-member sets")
    rng = np.random.default_rng(seed)
    m_rows, nm_rows = balanced_subsample(np.arange(len(member_set)), np.arange(len(nonmember_set)), rng)
    members = member_set.subset(m_rows)
    nonmembers = nonmember_set.subset(nm_rows)
    return threshold_attack_accuracy(
        per_example_loss(model, spec, members.features, members.labels),
        per_example_loss(model, spec, nonmembers.features, nonmembers.labels),
    )

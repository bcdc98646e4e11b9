"""Evaluation metrics and the per-run CSV schema.

Communication accuracy (ComAcc) is the fraction of meanings the channel
round-trips exactly: greedy sender message, receiver encode, greedy decode,
compared for equality. For the random-branching receiver it averages over
``draws`` independent encodes; the other strategies are deterministic, so one
pass suffices.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields

import numpy as np

from .agents import Strategy

CSV_FIELDS = [
    "iteration",
    "comacc_train",
    "comacc_test",
    "mean_log_prior_train",
    "mean_log_prior_test",
    "recon_loss",
    "kl",
    "beta",
    "entropy",
    "wall_seconds",
]


@dataclass
class MetricsRecord:
    iteration: int
    comacc_train: float
    comacc_test: float
    mean_log_prior_train: float  # nan when the run has no prior
    mean_log_prior_test: float
    recon_loss: float
    kl: float
    beta: float
    entropy: float
    wall_seconds: float

    def as_row(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


assert [f.name for f in fields(MetricsRecord)] == CSV_FIELDS


def _greedy_messages(sender, meanings):
    state = sender.encode(meanings)
    return sender.emit(state, mode="greedy").batch


def comacc(sender, receiver, meanings, strategy, eval_rng=None, draws=1):
    """Exact-reconstruction rate over ``meanings`` (greedy on both sides).

    Deterministic given (parameters, meanings, strategy, rng state, draws);
    for non-random strategies extra draws are skipped since every draw would
    decode identically.
    """
    if draws < 1:
        raise ValueError(f"draws must be >= 1, got {draws}")
    strategy = Strategy.parse(strategy)
    if strategy is not Strategy.RANDOM_BRANCHING:
        draws = 1
    meanings = [tuple(m) for m in meanings]
    batch = _greedy_messages(sender, meanings)
    correct = 0
    for _ in range(draws):
        enc = receiver.encode(batch, strategy, rng=eval_rng)
        decoded = receiver.greedy_decode(enc)
        correct += sum(d == m for d, m in zip(decoded, meanings))
    return correct / (draws * len(meanings))


def mean_log_prior(sender, receiver, meanings, strategy, eval_rng=None):
    """Mean per-message log prior of the greedy messages for ``meanings``."""
    strategy = Strategy.parse(strategy)
    meanings = [tuple(m) for m in meanings]
    batch = _greedy_messages(sender, meanings)
    enc = receiver.encode(batch, strategy, rng=eval_rng)
    lp = receiver.message_log_prior(batch, enc.reads)
    return float(lp.data.mean())


# ---------------------------------------------------------------------------
# metrics.csv


def append_metrics(path, record):
    """Append one row, writing the header first on an empty/new file; the row
    is flushed immediately so a crashed run keeps everything logged so far."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if fresh:
            writer.writeheader()
        writer.writerow(record.as_row())
        fh.flush()
        os.fsync(fh.fileno())


def read_metrics(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                MetricsRecord(
                    iteration=int(row["iteration"]),
                    **{
                        k: float(row[k])
                        for k in CSV_FIELDS
                        if k != "iteration"
                    },
                )
            )
    return out

"""Interaction logs: CSV ingestion, per-user chronological sequences, splits, synthetic data."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

log = logging.getLogger(__name__)

CSV_HEADER = ["user_id", "item_id", "label", "timestamp"]


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    label: int
    timestamp: int


@dataclass
class UserSequence:
    user: int
    items: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    # positions before this index are context only; scored positions start here
    eval_from: int = 0

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Dataset:
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)
    sequences: list[UserSequence] = field(default_factory=list)
    # ground truth of synthetic datasets; None for loaded data
    item_topic: np.ndarray | None = None
    user_topic: np.ndarray | None = None

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def positive_rate(self) -> float:
        n = self.n_interactions
        return sum(int(s.labels.sum()) for s in self.sequences) / n if n else 0.0

    def records(self):
        for s in self.sequences:
            for i, y, t in zip(s.items, s.labels, s.timestamps):
                yield InteractionRecord(self.user_ids[s.user], self.item_ids[i], int(y), int(t))


def build_dataset(records, max_seq_len: int | None = None) -> Dataset:
    """Group records per user, sort by time (stable), keep the latest ``max_seq_len``.

    Dense ids follow first appearance in ``records``.
    """
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    rows: dict[int, list] = {}
    for order, r in enumerate(records):
        u = users.setdefault(r.user_id, len(users))
        i = items.setdefault(r.item_id, len(items))
        rows.setdefault(u, []).append((r.timestamp, order, i, r.label))
    seqs = []
    for u in range(len(users)):
        hist = sorted(rows[u])
        if max_seq_len is not None:
            hist = hist[-max_seq_len:]
        ts, _, it, lab = zip(*hist)
        seqs.append(UserSequence(u, np.array(it, np.int64), np.array(lab, np.int64), np.array(ts, np.int64)))
    return Dataset(list(users), list(items), seqs)


def load_csv(path, max_seq_len: int | None = None) -> Dataset:
    path = Path(path)
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: empty file, expected header {','.join(CSV_HEADER)}")
        if [h.strip() for h in header] != CSV_HEADER:
            raise DataFormatError(f"{path}: header {header} is not {','.join(CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 4:
                raise DataFormatError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            user, item, label, ts = (c.strip() for c in row)
            try:
                y = int(label)
                t = int(ts)
            except ValueError:
                raise DataFormatError(f"{path}:{line}: label and timestamp must be integers") from None
            if y not in (0, 1):
                raise DataFormatError(f"{path}:{line}: label {y} is not 0/1")
            if not user or not item:
                raise DataFormatError(f"{path}:{line}: empty user or item id")
            records.append(InteractionRecord(user, item, y, t))
    return build_dataset(records, max_seq_len)


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in dataset.records():
            w.writerow([r.user_id, r.item_id, r.label, r.timestamp])


def synth_generate(n_users: int, n_items: int, seq_len: int, n_topics: int, period: int, rng: Rng,
                   on_topic: float = 0.5) -> Dataset:
    """Users with one preferred topic whose interest switches on and off periodically.

    Items get a random topic. At each step a user sees an item of their own
    topic with probability ``on_topic`` (otherwise any item). The click
    probability is 0.8 when the item matches the user's topic and the step
    falls in the first half of the period, and 0.1 otherwise.
    """
    if min(n_users, n_items, seq_len, n_topics) < 1 or period < 2:
        raise ValueError("synthetic data needs positive counts and period >= 2")
    if n_topics > n_items:
        raise ValueError(f"n_topics {n_topics} exceeds n_items {n_items}")
    item_topic = rng.permutation(n_items) % n_topics
    by_topic = [np.flatnonzero(item_topic == k) for k in range(n_topics)]
    user_topic = rng.integers(n_users, n_topics)
    n = n_users * seq_len
    pick_own = rng.uniform_array(n).reshape(n_users, seq_len) < on_topic
    any_item = rng.integers(n, n_items).reshape(n_users, seq_len)
    own_pick = rng.uniform_array(n).reshape(n_users, seq_len)
    click = rng.uniform_array(n).reshape(n_users, seq_len)
    active = (np.arange(seq_len) % period) < (period + 1) // 2

    seqs = []
    for u in range(n_users):
        pool = by_topic[user_topic[u]]
        own = pool[np.minimum((own_pick[u] * pool.size).astype(np.int64), pool.size - 1)]
        items = np.where(pick_own[u], own, any_item[u])
        p = np.where((item_topic[items] == user_topic[u]) & active, 0.8, 0.1)
        labels = (click[u] < p).astype(np.int64)
        seqs.append(UserSequence(u, items, labels, np.arange(seq_len, dtype=np.int64)))
    return Dataset([f"u{u}" for u in range(n_users)], [f"i{i}" for i in range(n_items)], seqs, item_topic, user_topic)


def split_temporal(dataset: Dataset, test_fraction: float = 0.1) -> tuple[Dataset, Dataset]:
    """Per user, the last ceil(fraction * L) interactions become test.

    ``train`` holds the prefixes. ``test`` holds whole sequences with
    ``eval_from`` marking the first test position, so test predictions can
    condition on everything that came before them.
    """
    if not 0 <= test_fraction < 1:
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    train, test = [], []
    skipped = 0
    for s in dataset.sequences:
        L = len(s)
        if L < 2:
            skipped += 1
            continue
        n_test = math.ceil(test_fraction * L - 1e-9)
        cut = L - n_test
        train.append(UserSequence(s.user, s.items[:cut], s.labels[:cut], s.timestamps[:cut]))
        if n_test:
            test.append(UserSequence(s.user, s.items, s.labels, s.timestamps, eval_from=cut))
    if skipped:
        log.warning("split_temporal skipped %d users with fewer than 2 interactions", skipped)
    mk = lambda seqs: Dataset(dataset.user_ids, dataset.item_ids, seqs, dataset.item_topic, dataset.user_topic)
    return mk(train), mk(test)

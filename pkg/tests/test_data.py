import numpy as np
import pytest

from malloc_bench.data import (
    DataFormatError, InteractionRecord, build_dataset, load_csv, save_csv, split_temporal, synth_generate,
)
from malloc_bench.metrics import ScoredImpressions, auc
from malloc_bench.numerics import Rng

HEADER = "user_id,item_id,label,timestamp\n"


def write(tmp_path, body, name="d.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body)
    return p


def test_header_only_is_empty(tmp_path):
    ds = load_csv(write(tmp_path, ""))
    assert ds.n_users == 0 and ds.n_interactions == 0


def test_rows_sorted_by_timestamp(tmp_path):
    ds = load_csv(write(tmp_path, "u,a,1,30\nu,b,0,10\nu,c,1,20\n"))
    s = ds.sequences[0]
    assert s.timestamps.tolist() == [10, 20, 30]
    assert [ds.item_ids[i] for i in s.items] == ["b", "c", "a"]
    assert s.labels.tolist() == [0, 1, 1]


def test_equal_timestamps_keep_file_order(tmp_path):
    ds = load_csv(write(tmp_path, "u,a,1,5\nu,b,0,5\nu,c,1,5\n"))
    assert [ds.item_ids[i] for i in ds.sequences[0].items] == ["a", "b", "c"]


def test_truncation_keeps_latest_suffix(tmp_path):
    rows = "".join(f"u,i{t},{t % 2},{t}\n" for t in range(200))
    full = load_csv(write(tmp_path, rows))
    ds = load_csv(write(tmp_path, rows, "e.csv"), max_seq_len=128)
    assert len(ds.sequences[0]) == 128
    np.testing.assert_array_equal(ds.sequences[0].timestamps, full.sequences[0].timestamps[-128:])


@pytest.mark.parametrize("body,match", [
    ("u,a,2,1\n", ":2:"),
    ("u,a,1\n", "expected 4 fields"),
    ("u,a,1,x\n", "integers"),
    ("u,a,1,1\n,b,0,2\n", ":3:"),
])
def test_malformed_rows_report_line(tmp_path, body, match):
    with pytest.raises(DataFormatError, match=match):
        load_csv(write(tmp_path, body))


def test_bad_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b,c,d\n")
    with pytest.raises(DataFormatError):
        load_csv(p)


def test_first_appearance_ids():
    recs = [InteractionRecord("b", "y", 1, 2), InteractionRecord("a", "x", 0, 1), InteractionRecord("b", "x", 0, 0)]
    ds = build_dataset(recs)
    assert ds.user_ids == ["b", "a"] and ds.item_ids == ["y", "x"]


def test_reload_is_idempotent(tmp_path):
    ds = synth_generate(20, 15, 10, 3, 4, Rng(5))
    save_csv(ds, tmp_path / "a.csv")
    a = load_csv(tmp_path / "a.csv")
    save_csv(a, tmp_path / "b.csv")
    b = load_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.user_ids == b.user_ids and a.item_ids == b.item_ids
    for s, t in zip(a.sequences, b.sequences):
        np.testing.assert_array_equal(s.items, t.items)


def test_synth_counts_and_determinism(tmp_path):
    one = synth_generate(1, 10, 4, 2, 4, Rng(0))
    assert one.n_interactions == 4
    a, b = synth_generate(50, 30, 16, 5, 8, Rng(9)), synth_generate(50, 30, 16, 5, 8, Rng(9))
    save_csv(a, tmp_path / "a.csv")
    save_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_synth_positive_rate_reproducible():
    a = synth_generate(300, 50, 32, 5, 8, Rng(2)).positive_rate()
    b = synth_generate(300, 50, 32, 5, 8, Rng(2)).positive_rate()
    assert abs(a - b) <= 0.01
    assert 0.15 < a < 0.45


def test_synth_signal_visible_to_topic_heuristic():
    ds = synth_generate(1000, 200, 128, 10, 8, Rng(1))
    users, scores, labels = [], [], []
    for s in ds.sequences:
        topics = ds.item_topic[s.items]
        favourite = np.bincount(topics[s.labels == 1], minlength=10).argmax()
        scores.extend((topics == favourite).astype(float))
        labels.extend(s.labels)
        users.extend([s.user] * len(s))
    assert auc(ScoredImpressions.from_lists(users, scores, labels)) >= 0.7


def test_synth_rejects_bad_args():
    with pytest.raises(ValueError):
        synth_generate(1, 3, 4, 5, 4, Rng(0))
    with pytest.raises(ValueError):
        synth_generate(1, 3, 4, 2, 1, Rng(0))


def test_split_last_fraction():
    ds = synth_generate(3, 10, 10, 2, 4, Rng(1))
    train, test = split_temporal(ds, 0.1)
    assert all(len(s) == 9 for s in train.sequences)
    assert all(s.eval_from == 9 and len(s) == 10 for s in test.sequences)
    train, test = split_temporal(ds, 0.0)
    assert all(len(s) == 10 for s in train.sequences) and not test.sequences


def test_split_is_temporal():
    rng = np.random.default_rng(0)
    recs = [InteractionRecord(f"u{u}", f"i{rng.integers(20)}", int(rng.integers(2)), int(rng.integers(1000)))
            for u in range(100) for _ in range(rng.integers(2, 30))]
    ds = build_dataset(recs)
    train, test = split_temporal(ds, 0.2)
    by_user = {s.user: s for s in test.sequences}
    for s in train.sequences:
        t = by_user[s.user]
        assert s.timestamps.max() <= t.timestamps[t.eval_from:].min()


def test_split_skips_short_users(caplog):
    ds = build_dataset([InteractionRecord("a", "x", 1, 0), InteractionRecord("b", "x", 1, 0), InteractionRecord("b", "y", 0, 1)])
    train, test = split_temporal(ds)
    assert len(train.sequences) == 1
    assert "skipped 1" in caplog.text

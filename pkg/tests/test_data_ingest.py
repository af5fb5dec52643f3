import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdm_marl import data_ingest as di


def _line(unit, cycle, settings=(0.0, 0.0, 100.0), sensors=None):
    sensors = [1.0] * 21 if sensors is None else sensors
    return " ".join(str(v) for v in [unit, cycle, *settings, *sensors])


def _trace(T, eid=1, seed=0):
    rng = np.random.default_rng(seed)
    return di.EngineTrace(eid, rng.normal(size=(T, 24)))


# -- parsing --------------------------------------------------------------------

def test_parse_empty_input():
    assert di.parse_cmapss(io.StringIO("")) == []


def test_parse_two_lines_one_trace():
    traces = di.parse_cmapss(io.StringIO(_line(1, 1) + "\n" + _line(1, 2) + "  \n"))
    assert len(traces) == 1
    assert traces[0].cycles == 2
    assert traces[0].signals.shape == (2, 24)


def test_parse_orders_units_and_tolerates_trailing_whitespace():
    text = "\n".join([_line(2, 1), _line(1, 1), _line(1, 2) + "   ", _line(2, 2)]) + "\n\n"
    traces = di.parse_cmapss(io.StringIO(text))
    assert [t.engine_id for t in traces] == [1, 2]


def test_parse_error_reports_line_number():
    text = _line(1, 1) + "\n" + _line(1, 2).replace("100.0", "abc") + "\n"
    with pytest.raises(di.ParseError) as exc:
        di.parse_cmapss(io.StringIO(text))
    assert exc.value.line_no == 2


def test_parse_wrong_column_count():
    with pytest.raises(di.ParseError):
        di.parse_cmapss(io.StringIO("1 1 0 0 100 1 2 3\n"))


def test_parse_noncontiguous_cycles():
    with pytest.raises(di.IntegrityError):
        di.parse_cmapss(io.StringIO(_line(1, 1) + "\n" + _line(1, 3) + "\n"))


def test_synthetic_file_parses_with_expected_engine_count():
    traces = di.parse_cmapss(io.StringIO(di.synthetic_cmapss(7, seed=3)))
    assert len(traces) == 7
    assert all(t.signals.shape[1] == 24 for t in traces)


# -- split -----------------------------------------------------------------------

@pytest.mark.parametrize("n, n_train", [(249, 124), (2, 1), (100, 50)])
def test_split_counts(n, n_train):
    traces = [_trace(3, eid=i + 1) for i in range(n)]
    split = di.split_engines(traces, 0.5)
    assert len(split.train_engines) == n_train
    assert [t.engine_id for t in split.train_engines] == list(range(1, n_train + 1))
    ids_train = {t.engine_id for t in split.train_engines}
    ids_test = {t.engine_id for t in split.test_engines}
    assert not ids_train & ids_test
    assert len(ids_train) + len(ids_test) == n


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_split_rejects_bad_fraction(fraction):
    with pytest.raises(di.ConfigError):
        di.split_engines([_trace(3)], fraction)


# -- normalization -----------------------------------------------------------------

def test_constant_column_normalizes_to_zero():
    sig = np.random.default_rng(0).normal(size=(50, 24))
    sig[:, :3] = [0.0, 0.0, 100.0]
    sig[:, 7] = 3.25
    tr = di.EngineTrace(1, sig)
    out = di.apply_normalization(tr, di.fit_normalization([tr]))
    assert np.all(out.signals[:, 7] == 0.0)


def test_zscore_value():
    # column with mean 10, population sd 2; value 14 -> 2.0
    sig = np.zeros((4, 24))
    sig[:, 2] = 100.0
    sig[:, 5] = [8.0, 12.0, 8.0, 12.0]
    stats = di.fit_normalization([di.EngineTrace(1, sig)])
    probe = sig[:1].copy()
    probe[0, 5] = 14.0
    out = di.apply_normalization(di.EngineTrace(1, probe), stats)
    assert out.signals[0, 5] == pytest.approx(2.0)


def test_single_condition_subset_has_one_cluster():
    traces = di.parse_cmapss(io.StringIO(di.synthetic_cmapss(5, seed=1, n_conditions=1)))
    assert di.fit_normalization(traces).n_clusters == 1


def test_six_condition_subset_has_six_clusters():
    traces = di.parse_cmapss(io.StringIO(di.synthetic_cmapss(6, seed=1, n_conditions=6)))
    assert di.fit_normalization(traces).n_clusters == 6


def test_normalization_round_trip_moments():
    traces = di.parse_cmapss(io.StringIO(di.synthetic_cmapss(6, seed=2, n_conditions=6)))
    stats = di.fit_normalization(traces)
    normed = np.concatenate([di.apply_normalization(t, stats).signals for t in traces])
    raw = np.concatenate([t.signals for t in traces])
    keys = di._cluster_keys(raw[:, :3], stats.decimals)
    for key in stats.keys:
        block = normed[np.all(keys == key, axis=1)]
        assert np.all(np.abs(block.mean(axis=0)) < 1e-9)
        sd = block.std(axis=0)
        assert np.all(np.isclose(sd, 1.0) | (sd == 0.0))


def test_unseen_cluster_falls_back_with_warning(caplog):
    sig = np.random.default_rng(0).normal(size=(20, 24))
    sig[:, :3] = [0.0, 0.0, 100.0]
    stats = di.fit_normalization([di.EngineTrace(1, sig)])
    other = sig.copy()
    other[:, :3] = [10.0, 0.25, 100.0]
    with caplog.at_level("WARNING"):
        out = di.apply_normalization(di.EngineTrace(2, other), stats)
    assert "unseen" in caplog.text
    assert np.all(np.isfinite(out.signals))


def test_stats_array_round_trip():
    traces = di.parse_cmapss(io.StringIO(di.synthetic_cmapss(3, seed=4, n_conditions=6)))
    stats = di.fit_normalization(traces)
    back = di.NormalizationStats.from_arrays(stats.to_arrays())
    assert np.array_equal(back.keys, stats.keys) and np.array_equal(back.std, stats.std)
    assert back.decimals == stats.decimals


# -- windows ------------------------------------------------------------------------

def test_make_windows_t100():
    samples = di.make_windows(_trace(100), s=60, p=1)
    assert len(samples) == 41
    assert [s.rul_label for s in samples] == list(range(40, -1, -1))
    assert samples[0].end_cycle == 60 and samples[-1].end_cycle == 100


def test_label_cap():
    samples = di.make_windows(_trace(60 + 200), s=60)
    assert samples[0].rul_label == 125.0
    assert max(s.rul_label for s in samples) <= 125.0


def test_short_trace_skipped_with_warning(caplog):
    with caplog.at_level("WARNING"):
        assert di.make_windows(_trace(30), s=60) == []
    assert caplog.text


def test_window_contents_match_trace():
    tr = _trace(70)
    samples = di.make_windows(tr, s=60, p=5)
    assert np.array_equal(samples[1].window, tr.signals[5:65])
    assert np.allclose(samples[1].handcrafted, di.handcrafted_features(tr.signals[5:65]))


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 140), s=st.integers(2, 60), p=st.integers(1, 7))
def test_window_count_identity(T, s, p):
    samples = di.make_windows(_trace(T), s=s, p=p)
    expected = (T - s) // p + 1 if T >= s else 0
    assert len(samples) == expected == di.window_count(T, s, p)
    labels = [x.rul_label for x in samples]
    assert all(a >= b for a, b in zip(labels, labels[1:]))
    assert all(a > b for a, b in zip(labels, labels[1:]) if a < 125)
    if samples and p == 1:
        assert labels[-1] == 0


# -- handcrafted features -----------------------------------------------------------------

def test_handcrafted_constant_and_ramp():
    w = np.zeros((60, 24))
    w[:, 0] = 4.5
    w[:, 1] = np.arange(60)
    f = di.handcrafted_features(w)
    assert f.shape == (48,)
    assert f[0] == pytest.approx(4.5) and f[24] == pytest.approx(0.0, abs=1e-12)
    assert f[25] == pytest.approx(1.0)


def test_handcrafted_three_points():
    w = np.zeros((3, 24))
    w[:, 3] = [3.0, 5.0, 7.0]
    f = di.handcrafted_features(w)
    assert f[3] == pytest.approx(5.0) and f[24 + 3] == pytest.approx(2.0)


def test_batch_handcrafted_matches_single():
    ws = np.random.default_rng(1).normal(size=(5, 60, 24))
    batch = di._batch_handcrafted(ws)
    for i in range(5):
        assert np.allclose(batch[i], di.handcrafted_features(ws[i]))


# -- cache ----------------------------------------------------------------------------

def test_window_cache_round_trip(tmp_path):
    samples = di.make_windows(_trace(65), s=60)
    path = tmp_path / "cache.csv"
    di.write_window_cache(path, samples)
    back = di.read_window_cache(path)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert np.array_equal(a.window, b.window)
        assert np.array_equal(a.handcrafted, b.handcrafted)
        assert a.rul_label == b.rul_label and a.engine_id == b.engine_id and a.end_cycle == b.end_cycle


def test_split_is_deterministic():
    text = di.synthetic_cmapss(9, seed=5)
    a = di.split_engines(di.parse_cmapss(io.StringIO(text)))
    b = di.split_engines(di.parse_cmapss(io.StringIO(text)))
    assert [t.engine_id for t in a.train_engines] == [t.engine_id for t in b.train_engines]

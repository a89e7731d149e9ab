import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mindmeld import demonstrators as dm
from mindmeld.demonstrators import LabelSequence, StyleProfile


def smooth_labels(n=80, seed=0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 4 * np.pi, n)
    return 0.8 * np.sin(t + rng.uniform(0, np.pi)) + 0.2 * np.sin(3 * t)


def test_identity_is_fixed_point():
    o = smooth_labels()
    seq = dm.corrupt(o, StyleProfile(0, **dm.IDENTITY), seed=3)
    np.testing.assert_array_equal(seq.a, o)


def test_pure_magnitude():
    o = smooth_labels() * 0.5
    seq = dm.corrupt(o, StyleProfile(1, 0, 1.5, 0.0), seed=0)
    np.testing.assert_allclose(seq.a, 1.5 * o)


def test_delay_shifts_later():
    o = smooth_labels()
    seq = dm.corrupt(o, StyleProfile(1, 3, 1.0, 0.0), seed=0)
    np.testing.assert_array_equal(seq.a[3:], o[:-3])
    assert np.all(seq.a[:3] == o[0])


def test_anticipation_shifts_earlier():
    o = smooth_labels()
    seq = dm.corrupt(o, StyleProfile(1, -2, 1.0, 0.0), seed=0)
    np.testing.assert_array_equal(seq.a[:-2], o[2:])


def test_corrupt_clips_to_wheel_range():
    o = np.full(20, 2.0)
    seq = dm.corrupt(o, StyleProfile(1, 0, 2.0, 0.0), seed=0)
    assert np.all(seq.a == 2.5)


def test_noise_is_seeded_and_sized():
    o = smooth_labels(400)
    s = StyleProfile(4, 0, 1.0, 0.05)
    a1 = dm.corrupt(o, s, seed=11, task_id=2).a
    a2 = dm.corrupt(o, s, seed=11, task_id=2).a
    a3 = dm.corrupt(o, s, seed=11, task_id=3).a
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, a3)
    assert np.std(a1 - o) == pytest.approx(0.05, rel=0.15)


def test_short_sequence_rejected():
    with pytest.raises(ValueError, match="too short"):
        dm.corrupt(np.zeros(6), StyleProfile(0, 3, 1.0), seed=0)


def test_magnitude_must_be_positive():
    with pytest.raises(ValueError):
        StyleProfile(0, 0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_sampled_styles_in_declared_ranges(seed):
    s = dm.sample_style(seed, id=5)
    assert s.id == 5
    assert -dm.MAX_SHIFT <= s.timing <= dm.MAX_SHIFT
    assert s.magnitude != 1.0
    assert 0.3 <= s.magnitude <= 2.0
    assert s.timing_class in dm.TIMING_CLASSES
    assert s.over_corrector == (s.magnitude > 1)


def test_style_classes_roughly_uniform():
    styles = [dm.sample_style(k) for k in range(3000)]
    classes = [s.timing_class for s in styles]
    for c in dm.TIMING_CLASSES:
        assert classes.count(c) / 3000 == pytest.approx(1 / 3, abs=0.04)
    assert np.mean([s.over_corrector for s in styles]) == pytest.approx(0.5, abs=0.04)
    assert all(s.timing != 0 for s in styles if s.timing_class != "neither")


def test_label_csv_roundtrip(tmp_path):
    seq = dm.corrupt(smooth_labels(30), dm.sample_style(2, id=7), seed=1, task_id=4)
    seq.write_csv(tmp_path / "l.csv")
    back = LabelSequence.read_csv(tmp_path / "l.csv", demonstrator_id=7, task_id=4)
    np.testing.assert_array_equal(back.a, seq.a)
    np.testing.assert_array_equal(back.o, seq.o)
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "t,o,a"


def test_manifest_roundtrip(tmp_path):
    styles = [dm.sample_style(k, id=k) for k in range(5)]
    dm.write_manifest(styles, tmp_path / "m.json")
    assert dm.read_manifest(tmp_path / "m.json") == styles


def test_label_sequence_length_mismatch():
    with pytest.raises(ValueError):
        LabelSequence(0, 0, [1.0, 2.0], [1.0])

import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gaitaudit.data import (
    COLUMNS,
    Manifest,
    SensorTrial,
    SplitManifest,
    SynthConfig,
    TrialEntry,
    TrialParseError,
    TrialTooShortError,
    cohens_d,
    generate_cohort,
    generate_synthetic,
    largest_remainder,
    load_trial,
    split_patients,
    trial_variance,
    write_trial,
)

from conftest import make_trial

TINY = dict(n_controls=2, n_patients=2, trials_per_patient=2, T=64)


def manifest_of(labels: dict[str, int], trials_each: int = 2) -> Manifest:
    entries = [TrialEntry(f"{p}_T{k}", p, y, "x", f"{p}_{k}.csv") for p, y in labels.items() for k in range(trials_each)]
    return Manifest("t", entries)


# ---------------------------------------------------------------- trial CSV


def test_columns_layout():
    assert len(COLUMNS) == 36
    assert COLUMNS[0] == "HE_acc_x" and COLUMNS[-1] == "RF_facc_z"


def test_trial_round_trip(tmp_path, rng):
    tr = make_trial(rng, T=20, label=1, tid="a", pid="p")
    tr.signal *= 1e3 ** rng.integers(-3, 3, size=tr.signal.shape)
    write_trial(tr, tmp_path / "a.csv")
    back = load_trial(tmp_path / "a.csv", TrialEntry("a", "p", 1, "PT", "a.csv"))
    assert (back.trial_id, back.patient_id, back.label, back.cohort) == ("a", "p", 1, "PT")
    np.testing.assert_allclose(back.signal, tr.signal, rtol=1e-12, atol=0)


def _write_rows(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(r) for r in rows]) + "\n")


def test_wrong_column_count(tmp_path):
    p = tmp_path / "bad.csv"
    _write_rows(p, ["t"] + list(COLUMNS[:35]), [["0"] + ["1"] * 35] * 10)
    with pytest.raises(TrialParseError, match="expected 36 data columns"):
        load_trial(p)


def test_non_numeric_cell_names_location(tmp_path):
    p = tmp_path / "bad.csv"
    rows = [[str(i)] + ["0.5"] * 36 for i in range(10)]
    rows[3][5] = "abc"
    _write_rows(p, ["t"] + list(COLUMNS), rows)
    with pytest.raises(TrialParseError) as e:
        load_trial(p)
    assert (e.value.row, e.value.column) == (5, 6)


def test_nan_rejected(tmp_path):
    p = tmp_path / "bad.csv"
    rows = [[str(i)] + ["0.5"] * 36 for i in range(10)]
    rows[0][1] = "nan"
    _write_rows(p, ["t"] + list(COLUMNS), rows)
    with pytest.raises(TrialParseError, match="non-finite"):
        load_trial(p)


def test_malformed_header(tmp_path):
    p = tmp_path / "bad.csv"
    header = ["t"] + list(COLUMNS)
    header[3] = "HE_acc_q"
    _write_rows(p, header, [["0"] + ["1"] * 36] * 10)
    with pytest.raises(TrialParseError, match="malformed header") as e:
        load_trial(p)
    assert e.value.column == 4


def test_empty_body_too_short(tmp_path):
    p = tmp_path / "empty.csv"
    _write_rows(p, ["t"] + list(COLUMNS), [])
    with pytest.raises(TrialTooShortError):
        load_trial(p)


def test_short_trial_rejected(tmp_path):
    p = tmp_path / "short.csv"
    _write_rows(p, ["t"] + list(COLUMNS), [[str(i)] + ["0"] * 36 for i in range(7)])
    with pytest.raises(TrialTooShortError):
        load_trial(p)


def test_sensor_trial_invariants(rng):
    with pytest.raises(ValueError):
        SensorTrial("a", "p", 0, "HS", np.zeros((3, 9, 16)))
    with pytest.raises(ValueError):
        SensorTrial("a", "p", 2, "HS", np.zeros((4, 9, 16)))
    bad = np.zeros((4, 9, 16))
    bad[0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        SensorTrial("a", "p", 0, "HS", bad)


# ---------------------------------------------------------------- manifest / generator


def test_manifest_rejects_duplicate_ids():
    e = TrialEntry("a", "p", 0, "HS", "a.csv")
    with pytest.raises(ValueError):
        Manifest("t", [e, e])


def test_minimal_cohort_has_two_trials(tmp_path):
    m = generate_synthetic(SynthConfig(n_controls=1, n_patients=1, trials_per_patient=1, T=16), tmp_path)
    assert len(m.trials) == 2
    assert sorted(t.label for t in m.trials) == [0, 1]
    with pytest.raises(ValueError):
        SynthConfig(n_patients=0)


def test_generator_bitwise_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_synthetic(SynthConfig(**TINY, seed=3), a)
    generate_synthetic(SynthConfig(**TINY, seed=3), b)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert len(files) == 1 + 8
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    c = generate_cohort(SynthConfig(**TINY, seed=4))
    assert c[0].signal.tobytes() != generate_cohort(SynthConfig(**TINY, seed=3))[0].signal.tobytes()


def test_manifest_round_trip(tmp_path):
    m = generate_synthetic(SynthConfig(**TINY), tmp_path)
    back = Manifest.load(tmp_path / "manifest.json")
    assert back.trials == m.trials and back.task == m.task
    trials = back.load_trials()
    assert [t.trial_id for t in trials] == [e.trial_id for e in m.trials]


def test_invalid_synth_configs():
    for bad in (dict(laterality_fraction_right=1.5), dict(anomaly="nope"), dict(T=4), dict(noise_std=-1)):
        with pytest.raises(ValueError):
            SynthConfig(**bad)


def _variances(trials, sensor, label):
    return np.array([trial_variance(t, sensor) for t in trials if t.label == label])


def test_planted_confound_effect_sizes():
    trials = generate_cohort(SynthConfig(n_controls=60, n_patients=60, trials_per_patient=4, T=256, seed=1))
    d_rf = cohens_d(_variances(trials, "RF", 0), _variances(trials, "RF", 1))
    d_lf = cohens_d(_variances(trials, "LF", 0), _variances(trials, "LF", 1))
    assert d_rf > 1.0
    assert abs(d_lf) < 0.2


def test_lf_indistinguishable_when_all_anomalies_right():
    trials = generate_cohort(SynthConfig(seed=2))
    res = stats.ttest_ind(_variances(trials, "LF", 0), _variances(trials, "LF", 1), equal_var=False)
    assert res.pvalue > 0.01


def test_laterality_split_exact():
    cfg = SynthConfig(n_controls=1, n_patients=10, trials_per_patient=1, T=200, laterality_fraction_right=0.5,
                      noise_std=0.0, subject_spread=0.0, anomaly_strength=0.9, seed=5)
    trials = generate_cohort(cfg)
    # the anomaly lowers the affected foot's amplitude relative to the other foot
    sides = ["RF" if trial_variance(t, "RF") < trial_variance(t, "LF") else "LF" for t in trials if t.label == 1]
    assert sides.count("RF") == 5


@pytest.mark.parametrize("kind", ["variability_boost", "axial_tremor"])
def test_other_anomalies_generate(kind):
    trials = generate_cohort(SynthConfig(**TINY, anomaly=kind))
    assert len(trials) == 8 and all(np.isfinite(t.signal).all() for t in trials)


def test_axial_tremor_only_touches_head():
    base = dict(n_controls=1, n_patients=1, trials_per_patient=1, T=128, seed=0)
    with_tremor = generate_cohort(SynthConfig(**base, anomaly="axial_tremor", anomaly_strength=0.8))
    without = generate_cohort(SynthConfig(**base, anomaly="axial_tremor", anomaly_strength=0.0))
    diff = with_tremor[1].signal - without[1].signal
    assert np.abs(diff[0]).max() > 0.01
    assert not diff[1:].any()


# ---------------------------------------------------------------- largest remainder / splits


def test_largest_remainder_examples():
    assert largest_remainder(20, (0.7, 0.15, 0.15)) == [14, 3, 3]
    assert largest_remainder(10, (0.7, 0.15, 0.15)) == [7, 2, 1]
    assert largest_remainder(10, (0.7, 0.15, 0.15), target=[7, 1, 2]) == [7, 1, 2]
    assert largest_remainder(7, (0.7, 0.15, 0.15)) == [5, 1, 1]


def test_split_golden_twenty_patients():
    labels = {f"P{i:02d}": int(i < 10) for i in range(20)}
    s = split_patients(manifest_of(labels), seed=0)
    assert s.train == ["P00", "P02", "P03", "P04", "P06", "P08", "P09", "P12", "P13", "P14", "P15", "P16", "P17", "P19"]
    assert s.val == ["P07", "P10", "P18"]
    assert s.test == ["P01", "P05", "P11"]
    pos = [sum(labels[p] for p in grp) for grp in (s.train, s.val, s.test)]
    assert pos == [7, 1, 2]
    assert s.warnings == []


def test_split_seeds_change_membership_not_sizes():
    m = manifest_of({f"P{i:02d}": int(i < 10) for i in range(20)})
    a, b = split_patients(m, seed=0), split_patients(m, seed=1)
    assert (len(a.train), len(a.val), len(a.test)) == (len(b.train), len(b.val), len(b.test))
    assert a.train != b.train


def test_split_trials_follow_patients():
    m = manifest_of({f"P{i:02d}": i % 2 for i in range(12)}, trials_each=3)
    s = split_patients(m, seed=4)
    for name in ("train", "val", "test"):
        for t in s.trials(m, name):
            assert t.patient_id in s.split_of(name)
    assert sum(len(s.trials(m, n)) for n in ("train", "val", "test")) == 36


def test_split_warns_when_class_too_small(caplog):
    m = manifest_of({"A": 1, **{f"N{i}": 0 for i in range(9)}})
    with caplog.at_level(logging.WARNING):
        s = split_patients(m, seed=0)
    assert s.warnings and "class 1" in s.warnings[0]
    assert caplog.records


def test_split_rejects_bad_ratios_and_single_class():
    m = manifest_of({"A": 0, "B": 1, "C": 0})
    with pytest.raises(ValueError):
        split_patients(m, ratios=(0.5, 0.3, 0.3))
    with pytest.raises(ValueError):
        split_patients(manifest_of({"A": 0, "B": 0}))


def test_split_manifest_round_trip(tmp_path):
    s = split_patients(manifest_of({f"P{i}": i % 2 for i in range(10)}), seed=2)
    s.save(tmp_path / "s.json")
    assert SplitManifest.load(tmp_path / "s.json") == s


@settings(max_examples=150, deadline=None)
@given(n_neg=st.integers(1, 40), n_pos=st.integers(1, 40), seed=st.integers(0, 2**31), stratify=st.booleans())
def test_split_leakage_free_and_sized(n_neg, n_pos, seed, stratify):
    labels = {f"N{i:03d}": 0 for i in range(n_neg)} | {f"P{i:03d}": 1 for i in range(n_pos)}
    s = split_patients(manifest_of(labels, trials_each=1), seed=seed, stratify=stratify)
    sets = [set(s.train), set(s.val), set(s.test)]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert set().union(*sets) == set(labels)
    sizes = [len(x) for x in sets]
    assert sizes == largest_remainder(n_neg + n_pos, (0.7, 0.15, 0.15))
    if stratify and min(n_neg, n_pos) >= 3 and min(sizes) >= 2:
        assert s.warnings == []
        for grp in sets:
            assert {labels[p] for p in grp} == {0, 1}

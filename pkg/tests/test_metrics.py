import csv
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from protosanity.errors import EmptySelectionError, InvalidArgumentError, UndefinedRatioError
from protosanity.metrics import (
    ORIGINAL_OVER_PERTURBED,
    DeletionCurve,
    EvalRecord,
    aggregate_report,
    audc,
    deletion_areas,
    deletion_batch,
    deletion_curve,
    effective_rf_area,
    first_crossing,
    fmt_float,
    mean_curves,
    read_csv,
    relevance,
    write_curves_csv,
    write_per_sample_csv,
)
from protosanity.network import analytic_receptive_field, forward
from protosanity.numerics import PixelMask
from protosanity.prototypes import PROTOPNET
from protosanity.saliency import PartPatch, SaliencyMap

from . import oracles
from .builders import random_model


def _curve(ratios, step=0.001):
    ratios = np.asarray(ratios, dtype=float)
    return DeletionCurve(np.arange(len(ratios)) * step, ratios, step * (len(ratios) - 1))


def _direct_similarity(model, x, proto, location):
    feats, _ = forward(model.network, x)
    d2 = sum((feats[c, location[0], location[1]] - model.prototypes[proto, c]) ** 2 for c in range(feats.shape[0]))
    return math.exp(-d2)


# --- sampling grid ---------------------------------------------------------


def test_default_grid_has_21_samples_from_zero():
    areas = deletion_areas()
    assert len(areas) == 21
    assert areas[0] == 0.0 and areas[-1] == pytest.approx(0.02)
    assert np.all(np.diff(areas) > 0)


@pytest.mark.parametrize("a_max,step", [(0.02, 0.0), (-0.1, 0.001)])
def test_grid_rejects_bad_parameters(a_max, step):
    with pytest.raises(InvalidArgumentError):
        deletion_areas(a_max, step)


# --- deletion --------------------------------------------------------------


def test_deletion_batch_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h, w = (int(v) for v in rng.integers(4, 20, size=2))
        x = rng.random((3, h, w))
        values = rng.integers(0, 5, size=(h, w)).astype(float)
        areas = [0.0, 0.01, 0.05, 0.2]
        batch = deletion_batch(x, values, areas)
        for k, a in enumerate(areas):
            expected = x.copy()
            if a > 0:
                expected[:, oracles.top_fraction(values, a)] = 0.0
            assert_array_equal(batch[k], expected)


def test_deletion_batch_rejects_mismatched_saliency():
    with pytest.raises(InvalidArgumentError):
        deletion_batch(np.zeros((3, 8, 8)), np.zeros((4, 4)), [0.0])


def test_curve_matches_direct_forward_oracle():
    model, x = random_model(20)
    values = np.random.default_rng(1).random((16, 16))
    curve = deletion_curve(model, x, 1, values, a_max=0.05, step=0.01, location=(1, 2))
    original = _direct_similarity(model, x, 1, (1, 2))
    for a, tau in zip(curve.areas, curve.ratios):
        perturbed = x.copy()
        if a > 0:
            perturbed[:, oracles.top_fraction(values, a)] = 0.0
        assert tau == pytest.approx(_direct_similarity(model, perturbed, 1, (1, 2)) / original, rel=1e-10)


def test_tau_at_zero_is_exactly_one():
    for seed in range(5):
        model, x = random_model(seed)
        values = np.random.default_rng(seed).random((16, 16))
        curve = deletion_curve(model, x, seed % 3, values)
        assert curve.ratios[0] == 1.0
        assert len(curve.areas) == len(curve.ratios) == 21


def test_curve_defaults_to_clean_peak_location():
    model, x = random_model(21)
    feats, _ = forward(model.network, x)
    sims = model.similarity_maps(feats)[2]
    expected = divmod(int(np.argmax(sims)), sims.shape[1])
    curve = deletion_curve(model, x, 2, np.zeros((16, 16)))
    assert curve.location == expected
    assert curve.reference == pytest.approx(sims.max())


def _rf_box_and_model(seed):
    model, x = random_model(seed)
    rf = analytic_receptive_field(model.network)
    return model, x, rf.box(1, 1)


def test_deleting_outside_the_receptive_field_leaves_tau_at_one():
    model, x, (top, left, bottom, right) = _rf_box_and_model(22)
    values = np.ones((16, 16))
    values[top : bottom + 1, left : right + 1] = 0.0
    outside = int((values > 0).sum())
    curve = deletion_curve(model, x, 0, values, a_max=outside / 256, step=outside / 256 / 4, location=(1, 1))
    assert_allclose(curve.ratios, 1.0, atol=1e-9)


def test_deleting_the_whole_receptive_field_matches_black_input():
    model, x, (top, left, bottom, right) = _rf_box_and_model(23)
    values = np.zeros((16, 16))
    values[top : bottom + 1, left : right + 1] = 1.0
    a = float((values > 0).sum()) / 256
    curve = deletion_curve(model, x, 0, values, a_max=a, step=a, location=(1, 1))
    blacked = x.copy()
    blacked[:, top : bottom + 1, left : right + 1] = 0.0
    expected = _direct_similarity(model, blacked, 0, (1, 1)) / _direct_similarity(model, x, 0, (1, 1))
    assert curve.ratios[-1] == pytest.approx(expected, rel=1e-10)


def test_tau_may_exceed_one():
    model, x = random_model(24)
    values = np.random.default_rng(2).random((16, 16))
    curves = [deletion_curve(model, x, p, values, a_max=0.2, step=0.02, location=(h, w)) for p in range(3) for h in range(4) for w in range(4)]
    assert max(c.ratios.max() for c in curves) > 1.0


def test_undefined_ratio_is_reported():
    model, x = random_model(25, kind=PROTOPNET)
    # far enough away that log1p(d2) and log(d2 + eps) round to the same value
    model.prototypes[0] += 1e10
    with pytest.raises(UndefinedRatioError):
        deletion_curve(model, x, 0, np.zeros((16, 16)))


def test_inverted_orientation_is_reciprocal():
    model, x = random_model(26)
    values = np.random.default_rng(3).random((16, 16))
    a = deletion_curve(model, x, 0, values, location=(2, 2))
    b = deletion_curve(model, x, 0, values, location=(2, 2), orientation=ORIGINAL_OVER_PERTURBED)
    assert_allclose(a.ratios * b.ratios, 1.0, rtol=1e-12)


def test_unknown_orientation_rejected():
    model, x = random_model(27)
    with pytest.raises(InvalidArgumentError):
        deletion_curve(model, x, 0, np.zeros((16, 16)), orientation="sideways")


# --- AUDC ------------------------------------------------------------------


def test_audc_of_flat_curve_is_one():
    assert audc(_curve(np.ones(21))) == 1.0


def test_audc_of_immediate_drop():
    assert audc(_curve([1.0] + [0.0] * 20)) == pytest.approx(1 / 21)
    assert audc(_curve([1.0] + [0.0] * 20), include_zero=False) == 0.0


def test_audc_matches_plain_mean():
    rng = np.random.default_rng(4)
    for _ in range(20):
        ratios = [1.0] + list(rng.random(20) * 1.2)
        assert audc(_curve(ratios)) == pytest.approx(statistics.fmean(ratios), rel=1e-12)


def test_audc_of_empty_curve_raises():
    with pytest.raises(InvalidArgumentError):
        audc(_curve([]))


# --- effective receptive field --------------------------------------------


def test_first_crossing_never_reached():
    assert first_crossing(_curve(np.full(101, 0.5))) is None


def test_first_crossing_picks_first_sample():
    ratios = np.ones(101)
    ratios[4:] = 0.1
    ratios[7] = 0.9
    assert first_crossing(_curve(ratios)) == pytest.approx(0.004)


def test_first_crossing_scan_limit():
    ratios = np.ones(101)
    ratios[60:] = 0.0
    assert first_crossing(_curve(ratios), scan_max=0.05) is None
    assert first_crossing(_curve(ratios), scan_max=0.10) == pytest.approx(0.06)


def test_threshold_above_one_crosses_at_zero():
    assert first_crossing(_curve(np.ones(11)), threshold=1.1) == 0.0


def test_effective_rf_area_matches_scan_of_full_curve():
    model, x = random_model(28)
    values = np.random.default_rng(5).random((16, 16))
    erf = effective_rf_area(model, x, 0, values, scan_max=0.5, step=0.01, location=(1, 1))
    curve = deletion_curve(model, x, 0, values, a_max=0.5, step=0.01, location=(1, 1))
    expected = next((float(a) for a, t in zip(curve.areas, curve.ratios) if t < 0.2), None)
    assert erf == expected


# --- relevance -------------------------------------------------------------


def test_box_inside_object_is_relevant():
    seg = np.zeros((20, 20), dtype=bool)
    seg[5:15, 5:15] = True
    verdict = relevance((6, 6, 9, 9), seg)
    assert verdict.overlap_fraction == 1.0 and not verdict.irrelevant


def test_box_in_background_is_irrelevant():
    seg = np.zeros((20, 20), dtype=bool)
    seg[15:, 15:] = True
    verdict = relevance((0, 0, 4, 4), seg)
    assert verdict.overlap_fraction == 0.0 and verdict.irrelevant


@pytest.mark.parametrize("hits,irrelevant", [(4, True), (5, False)])
def test_threshold_is_strict(hits, irrelevant):
    seg = np.zeros((10, 10), dtype=bool)
    seg.flat[:hits] = True
    verdict = relevance((0, 0, 9, 9), seg)
    assert verdict.overlap_fraction == hits / 100
    assert verdict.irrelevant is irrelevant


def test_relevance_matches_counting_oracle():
    rng = np.random.default_rng(6)
    for _ in range(30):
        h, w = (int(v) for v in rng.integers(4, 24, size=2))
        seg = rng.random((h, w)) < rng.random()
        top, bottom = sorted(int(v) for v in rng.integers(0, h, size=2))
        left, right = sorted(int(v) for v in rng.integers(0, w, size=2))
        box = (top, left, bottom, right)
        expected = oracles.box_overlap(box, seg)
        verdict = relevance(box, seg)
        assert verdict.overlap_fraction == pytest.approx(expected, abs=1e-15)
        assert verdict.irrelevant == (expected < 0.05)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 8), st.integers(0, 8))
def test_relevance_is_translation_invariant(seed, dy, dx):
    rng = np.random.default_rng(seed)
    seg = rng.random((12, 12)) < 0.3
    top, bottom = sorted(int(v) for v in rng.integers(0, 12, size=2))
    left, right = sorted(int(v) for v in rng.integers(0, 12, size=2))
    shifted = np.zeros((20, 20), dtype=bool)
    shifted[dy : dy + 12, dx : dx + 12] = seg
    a = relevance((top, left, bottom, right), seg)
    b = relevance((top + dy, left + dx, bottom + dy, right + dx), shifted)
    assert a == b


def test_mask_statistic_counts_retained_pixels():
    bits = np.zeros((6, 6), dtype=bool)
    bits[0, 0] = bits[5, 5] = True
    seg = np.zeros((6, 6), dtype=bool)
    seg[5, 5] = True
    patch = PartPatch(0, "prp", PixelMask(bits), (0, 0, 5, 5), np.zeros((3, 6, 6)))
    assert relevance(patch, seg, statistic="mask").overlap_fraction == 0.5
    assert relevance(patch, seg).overlap_fraction == pytest.approx(1 / 36)


def test_relevance_errors():
    seg = np.zeros((6, 6), dtype=bool)
    with pytest.raises(InvalidArgumentError):
        relevance((3, 3, 2, 4), seg)
    with pytest.raises(InvalidArgumentError):
        relevance((0, 0, 6, 2), seg)
    with pytest.raises(InvalidArgumentError):
        relevance((0, 0, 1, 1), seg, statistic="median")
    empty = PartPatch(0, "prp", PixelMask.empty(6, 6), (0, 0, 1, 1), np.zeros((3, 2, 2)))
    with pytest.raises(EmptySelectionError):
        relevance(empty, seg, statistic="mask")


# --- aggregation -----------------------------------------------------------


def _record(image_id, proto, method, role, value, irrelevant=None, kind="prototree"):
    return EvalRecord(image_id, proto, method, role, kind, (0, 0), value, None, None, irrelevant)


def test_single_result_has_zero_std():
    (row,) = aggregate_report([_record(0, 0, "prp", "prototype", 0.5)])
    assert row["audc_prototypes_mean"] == 0.5 and row["audc_prototypes_std"] == 0.0
    assert row["n_test_patches"] == 0 and row["audc_test_mean"] is None


def test_population_std():
    (row,) = aggregate_report([_record(0, 0, "prp", "test-patch", 0.4), _record(1, 0, "prp", "test-patch", 0.6)])
    assert row["audc_test_mean"] == pytest.approx(0.5)
    assert row["audc_test_std"] == pytest.approx(0.1)


def test_empty_aggregate_raises():
    with pytest.raises(InvalidArgumentError):
        aggregate_report([])


def test_aggregate_matches_recomputation_from_csv(tmp_path):
    rng = np.random.default_rng(7)
    methods = ["prp", "randgrads", "smoothgrads-input"]
    results = []
    for i in range(100):
        role = "prototype" if i % 4 == 0 else "test-patch"
        verdict = bool(rng.random() < 0.3) if rng.random() < 0.8 else None
        results.append(_record(i // 3, i % 7, methods[i % 3], role, float(rng.random()), verdict))
    path = tmp_path / "per_sample.csv"
    write_per_sample_csv(path, results)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 100
    for summary in aggregate_report(results):
        for role, tag in (("prototype", "prototypes"), ("test-patch", "test")):
            sel = [r for r in rows if r["method"] == summary["method"] and r["role"] == role]
            values = [float(r["audc"]) for r in sel]
            assert summary[f"audc_{tag}_mean"] == pytest.approx(statistics.fmean(values), rel=1e-12)
            assert summary[f"audc_{tag}_std"] == pytest.approx(statistics.pstdev(values), rel=1e-9, abs=1e-15)
            flags = [r["irrelevant"] == "1" for r in sel if r["irrelevant"] != ""]
            assert summary[f"irrelevant_{tag}_pct"] == pytest.approx(100 * sum(flags) / len(flags))


def test_aggregate_ignores_input_order():
    rng = np.random.default_rng(8)
    results = [_record(i, i % 3, "prp", "test-patch", float(rng.random())) for i in range(30)]
    shuffled = [results[i] for i in rng.permutation(30)]
    assert aggregate_report(results) == aggregate_report(shuffled)


def test_per_sample_csv_is_sorted_and_round_trips(tmp_path):
    results = [_record(2, 0, "prp", "test-patch", 0.1), _record(1, 3, "prp", "prototype", 1 / 3, True)]
    path = tmp_path / "per_sample.csv"
    write_per_sample_csv(path, results)
    rows = read_csv(path)
    assert [r["image_id"] for r in rows] == ["1", "2"]
    assert float(rows[0]["audc"]) == 1 / 3
    assert rows[0]["irrelevant"] == "1" and rows[1]["irrelevant"] == ""


def test_curves_csv_and_mean_curves(tmp_path):
    areas = deletion_areas()
    a = EvalRecord(0, 0, "prp", "test-patch", "prototree", (1, 1), 0.5, areas=areas, ratios=np.linspace(1, 0, 21))
    b = EvalRecord(1, 0, "prp", "test-patch", "prototree", (1, 1), 0.5, areas=areas, ratios=np.ones(21))
    path = tmp_path / "curves.csv"
    write_curves_csv(path, [a, b])
    assert len(read_csv(path)) == 42
    xs, ys = mean_curves([a, b])["prp"]
    assert_allclose(ys, (np.linspace(1, 0, 21) + 1) / 2)
    assert_array_equal(xs, areas)


@pytest.mark.parametrize("value,text", [(None, ""), (float("nan"), ""), (0.1, "0.1"), (1 / 3, repr(1 / 3))])
def test_fmt_float(value, text):
    assert fmt_float(value) == text


def test_saliency_map_objects_are_accepted():
    model, x = random_model(29)
    values = np.random.default_rng(9).random((16, 16))
    smap = SaliencyMap(values, "prp", (0, (1, 1)))
    a = deletion_curve(model, x, 0, smap, location=(1, 1))
    b = deletion_curve(model, x, 0, values, location=(1, 1))
    assert_array_equal(a.ratios, b.ratios)
    assert a.target[2] == "prp"

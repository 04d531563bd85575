"""Calibration measurement: expected calibration error, reliability bins,
confidence histograms, trajectories, and masked-token evaluation."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mlmcal.calibration import (
    CalibrationReport,
    compute_ece,
    confidence_histogram,
    mlm_calibration_eval,
    model_mlm_predictor,
    predict_classifier,
    read_prediction_dump,
    records_from_probs,
    reliability_bins,
    track_confidence,
    write_prediction_dump,
)
from mlmcal.corpus import Domain
from mlmcal.errors import ConfigurationError
from mlmcal.model import snapshot_pretrained


def _record(confidence, correct, k=3, domain=Domain.ID):
    """A record with the requested confidence; the remaining mass is
    spread over the other classes."""
    rest = (1.0 - confidence) / (k - 1)
    if rest > confidence:
        raise ValueError("confidence below 1/k")
    probs = (confidence,) + (rest,) * (k - 1)
    return records_from_probs(
        np.array([probs]), np.array([0 if correct else 1]), domain
    )[0]


def _random_records(n, k, seed, domain=Domain.ID):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0.0, 2.0, size=(n, k))
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    labels = rng.integers(0, k, size=n)
    return records_from_probs(probs, labels, domain)


# --------------------------------------------------------------- records


def test_record_validation():
    ok = _record(0.8, True)
    assert ok.pred_label == 0 and ok.true_label == 0
    with pytest.raises(ConfigurationError):
        records_from_probs(np.array([[0.8, 0.1]]), np.array([0]), Domain.ID)
    with pytest.raises(ConfigurationError):
        records_from_probs(np.array([[1.2, -0.2]]), np.array([0]), Domain.ID)
    with pytest.raises(ConfigurationError):
        records_from_probs(np.array([[0.5, 0.5]]), np.array([7]), Domain.ID)
    with pytest.raises(ConfigurationError):
        records_from_probs(np.array([0.5, 0.5]), np.array([0]), Domain.ID)


def test_unlabeled_records_carry_minus_one():
    recs = records_from_probs(np.array([[0.6, 0.4]]), None, Domain.OUTLIER)
    assert recs[0].true_label == -1


# ------------------------------------------------------------------- ece


def test_ece_matches_reference_on_random_sets():
    for seed in range(8):
        records = _random_records(200, 3, seed)
        mine = compute_ece(records, num_bins=10)
        ref = oracles.ece_reference(
            [r.confidence for r in records],
            [r.pred_label == r.true_label for r in records],
            10,
        )
        assert abs(mine.ece - ref) < 1e-12
        assert mine.num_records == 200


def test_ece_hand_case():
    records = [
        _record(0.95, True),
        _record(0.85, False),
        _record(0.85, True),
        _record(0.55, False),
    ]
    report = compute_ece(records, num_bins=10)
    assert report.ece == pytest.approx(0.325, abs=1e-12)
    by_index = {b.index: b for b in report.bins if b.count}
    assert set(by_index) == {6, 9, 10}
    assert by_index[10].count == 1 and by_index[10].accuracy == 1.0
    assert by_index[9].count == 2 and by_index[9].accuracy == 0.5
    assert by_index[6].count == 1 and by_index[6].accuracy == 0.0


def test_half_open_bin_boundaries():
    # Confidence exactly at an edge belongs to the lower bin: 0.9 is in
    # bin 9, (0.8, 0.9]; the first bin absorbs everything at or below 0.1.
    report = compute_ece([_record(0.9, True)], num_bins=10)
    hot = [b for b in report.bins if b.count][0]
    assert hot.index == 9
    two_class = records_from_probs(
        np.array([[0.5, 0.5]]), np.array([0]), Domain.ID
    )
    report2 = compute_ece(two_class, num_bins=10)
    hot2 = [b for b in report2.bins if b.count][0]
    assert hot2.index == 5


def test_single_record_ece_is_confidence_gap():
    report = compute_ece([_record(0.7, True)], num_bins=10)
    assert report.ece == pytest.approx(0.3, abs=1e-12)
    report = compute_ece([_record(0.7, False)], num_bins=10)
    assert report.ece == pytest.approx(0.7, abs=1e-12)


def test_empty_bins_report_none_and_contribute_nothing():
    report = compute_ece([_record(0.95, True)], num_bins=10)
    assert len(report.bins) == 10
    for b in report.bins:
        if b.count == 0:
            assert b.accuracy is None and b.mean_confidence is None
    assert report.ece == pytest.approx(0.05, abs=1e-12)


def test_degenerate_single_bin():
    records = [_record(0.95, True), _record(0.55, False)]
    report = compute_ece(records, num_bins=1)
    assert report.bins[0].count == 2
    assert report.ece == pytest.approx(abs(0.5 - 0.75), abs=1e-12)


def test_ece_rejects_empty_input():
    with pytest.raises(ConfigurationError):
        compute_ece([], num_bins=10)
    with pytest.raises(ConfigurationError):
        compute_ece([_record(0.9, True)], num_bins=0)


def test_ece_rejects_unlabeled_records():
    recs = records_from_probs(np.array([[0.6, 0.4]]), None, Domain.OUTLIER)
    with pytest.raises(ConfigurationError):
        compute_ece(recs, num_bins=10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 2**32 - 1), min_size=1, max_size=1), st.permutations(range(50)))
def test_ece_is_permutation_invariant(seeds, order):
    records = _random_records(50, 4, seeds[0])
    base = compute_ece(records, num_bins=10).ece
    shuffled = [records[i] for i in order]
    assert compute_ece(shuffled, num_bins=10).ece == pytest.approx(
        base, abs=1e-12
    )


def test_merging_two_populations_matches_weighted_bins():
    a = _random_records(120, 3, 1)
    b = _random_records(80, 3, 2)
    merged = compute_ece(a + b, num_bins=10)
    stats_a = [
        (x.count, x.accuracy, x.mean_confidence)
        for x in compute_ece(a, num_bins=10).bins
    ]
    stats_b = [
        (x.count, x.accuracy, x.mean_confidence)
        for x in compute_ece(b, num_bins=10).bins
    ]
    expected = oracles.merge_bins_reference(stats_a, stats_b, 200)
    assert merged.ece == pytest.approx(expected, abs=1e-12)


def test_report_round_trip_and_mean_stats():
    records = [_record(0.5, True, k=2), _record(1.0, True, k=2)]
    report = compute_ece(records, num_bins=10, domain="id")
    d = report.to_dict()
    back = CalibrationReport.from_dict(d)
    assert back == report
    assert back.domain == "id"
    hot = [b for b in back.bins if b.count == 1]
    assert {b.mean_confidence for b in hot} == {0.5, 1.0}
    assert reliability_bins(records, 10) == report.bins


# ------------------------------------------------------------- histogram


def test_histogram_edges_and_partition():
    records = _random_records(500, 4, 3)
    hist = confidence_histogram(records, num_buckets=10)
    assert hist.edges[0] == pytest.approx(0.25)
    assert hist.edges[-1] == pytest.approx(1.0)
    assert len(hist.edges) == 11
    assert sum(hist.counts) == 500
    # Oracle: explicit interval membership, lowest bucket closed below.
    ref = oracles.histogram_reference(
        [r.confidence for r in records], 4, 10
    )
    assert list(hist.counts) == ref


def test_histogram_boundary_goes_to_lower_bucket():
    records = [_record(0.4, True, k=4)]
    hist = confidence_histogram(records, num_buckets=10)
    edges = np.array(hist.edges)
    hot = int(np.flatnonzero(hist.counts)[0])
    # 0.4 sits exactly on the second edge: membership in bucket 2 of
    # (0.325, 0.4], i.e. index 1.
    assert hot == 1
    assert edges[hot] < 0.4 <= edges[hot + 1] + 1e-12


def test_histogram_rejects_mixed_and_empty():
    mixed = [_record(0.8, True, k=3), _record(0.8, True, k=4)]
    with pytest.raises(ConfigurationError):
        confidence_histogram(mixed)
    with pytest.raises(ConfigurationError):
        confidence_histogram([])
    with pytest.raises(ConfigurationError):
        confidence_histogram(_random_records(5, 3, 0), num_buckets=0)
    single = confidence_histogram(_random_records(50, 3, 0), num_buckets=1)
    assert single.counts == (50,)


# ------------------------------------------------------------ prediction


def test_predict_classifier_outputs_distributions(task_spec, tiny_store, id_eval):
    probs, labels = predict_classifier(tiny_store, id_eval)
    assert probs.shape == (len(id_eval), 3)
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9
    assert (labels >= 0).all()
    small = predict_classifier(tiny_store, id_eval, batch_size=7)[0]
    assert np.abs(small - probs).max() < 1e-6


def test_predict_classifier_handles_unlabeled(task_spec, tiny_store, outlier_eval):
    probs, labels = predict_classifier(tiny_store, outlier_eval)
    assert (labels == -1).all()
    assert probs.shape[0] == len(outlier_eval)
    with pytest.raises(ConfigurationError):
        predict_classifier(tiny_store, [])


def test_track_confidence_rows(task_spec, tiny_store, id_eval, od_eval, outlier_eval):
    second = tiny_store.clone()
    with torch.no_grad():
        second.named_arrays["cls_head.out.bias"].add_(0.5)
    splits = {
        Domain.ID: id_eval,
        Domain.OD: od_eval,
        Domain.OUTLIER: outlier_eval,
    }
    rows = track_confidence([tiny_store, second], splits)
    assert len(rows) == 6
    by_key = {(r.checkpoint, r.domain): r for r in rows}
    assert set(by_key) == {
        (t, d) for t in (0, 1) for d in splits
    }
    for (t, d), row in by_key.items():
        assert row.n == len(splits[d])
        assert 0.0 < row.mean_confidence <= 1.0
        if d is Domain.OUTLIER:
            assert row.accuracy is None and row.ece is None
        else:
            assert 0.0 <= row.accuracy <= 1.0
            assert 0.0 <= row.ece <= 1.0


# ------------------------------------------------------- masked-token eval


def test_mlm_calibration_eval_levels_and_modes(task_spec, tiny_store, pretrain_text):
    reports = mlm_calibration_eval(
        tiny_store, pretrain_text, mask_levels=(0.15, 0.5), seed=3
    )
    assert set(reports) == {0.15, 0.5}
    for level, report in reports.items():
        assert isinstance(report, CalibrationReport)
        assert report.num_records > 0
    again = mlm_calibration_eval(
        tiny_store, pretrain_text, mask_levels=(0.15, 0.5), seed=3
    )
    assert {k: v.ece for k, v in again.items()} == {
        k: v.ece for k, v in reports.items()
    }
    masked_only = mlm_calibration_eval(
        tiny_store, pretrain_text, mask_levels=(0.15,), seed=3, mode="mask_only"
    )
    assert 0.15 in masked_only
    with pytest.raises(ConfigurationError):
        mlm_calibration_eval(
            tiny_store, pretrain_text, mask_levels=(0.15,), mode="nope"
        )


def test_mlm_predictor_adapts_store(task_spec, tiny_store, pretrain_text):
    from mlmcal.corpus import corrupt_joint

    predictor = model_mlm_predictor(tiny_store, batch_rows=8)
    batch = corrupt_joint(
        pretrain_text[:20], 0.3, seed=5, max_len=tiny_store.config.max_len
    )
    probs = predictor(batch)
    assert probs.shape == (batch.num_targets, tiny_store.config.vocab_size)
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6
    via_callable = mlm_calibration_eval(
        predictor,
        pretrain_text,
        mask_levels=(0.3,),
        seed=7,
        vocab_size=tiny_store.config.vocab_size,
    )
    via_store = mlm_calibration_eval(
        tiny_store, pretrain_text, mask_levels=(0.3,), seed=7
    )
    assert via_callable[0.3].ece == pytest.approx(via_store[0.3].ece, abs=1e-9)


def test_mlm_calibration_eval_requires_vocab_for_callables(task_spec, pretrain_text):
    predictor = lambda batch: None  # noqa: E731
    with pytest.raises(ConfigurationError):
        mlm_calibration_eval(predictor, pretrain_text, mask_levels=(0.3,))


def test_pretrained_model_is_roughly_calibrated_on_masked_tokens(
    task_spec, tiny_store, pretrain_text
):
    # Smoke-scale version of the exact-posterior study: a pre-trained
    # model is not required here, only that the measurement pipeline
    # produces a finite, well-formed report over a decent sample.
    reports = mlm_calibration_eval(
        tiny_store, pretrain_text, mask_levels=(0.3,), seed=11
    )
    report = reports[0.3]
    assert 0.0 <= report.ece <= 1.0
    assert sum(b.count for b in report.bins) == report.num_records


# ------------------------------------------------------------------ dump


def test_prediction_dump_round_trip(tmp_path):
    records = _random_records(40, 3, 9, domain=Domain.OD)
    path = tmp_path / "preds.tsv"
    write_prediction_dump(records, path)
    back = read_prediction_dump(path)
    assert back == records
    assert compute_ece(back, 10).ece == compute_ece(records, 10).ece


def test_well_calibrated_synthetic_population():
    # Draw correctness from the stated confidence so the population is
    # calibrated by construction; the measured error on 20000 records
    # stays small.
    rng = np.random.default_rng(17)
    n = 20000
    conf = rng.uniform(0.34, 0.99, size=n)
    correct = rng.random(n) < conf
    records = []
    for c, ok in zip(conf, correct):
        rest = (1.0 - c) / 2
        probs = np.array([c, rest, rest])
        records.append(
            records_from_probs(
                probs[None, :], np.array([0 if ok else 1]), Domain.ID
            )[0]
        )
    report = compute_ece(records, num_bins=10)
    assert report.ece < 0.02

import math

import numpy as np
import pytest

from queryforensics import DegenerateTemplateError, Image, InvalidInputError, \
    NoiseModel, PatternModel, Procedure, ProcedureDB, ObservationSequence, \
    estimate_noise_pmf, extract_template, gaussian_noise_model, log_emission, \
    quantize, uniform_noise_model, binarize, psd2
from queryforensics.procedures import DELTA_LEVELS, SMOOTHING_FLOOR, log_floor, \
    log_emission_table

from conftest import random_delta, random_image


def _quantized_gaussian_delta(rng, dims, sigma):
    raw = rng.normal(0, sigma, dims)
    return np.clip(np.rint(raw * 255), -255, 255) / 255.0


# -- log_emission ---------------------------------------------------------------

def test_null_on_zero_delta():
    proc = Procedure("NULL", "null")
    assert log_emission(proc, np.zeros((4, 4, 1))) == 0.0


def test_null_on_nonzero_delta_floors():
    proc = Procedure("NULL", "null")
    delta = np.zeros((4, 4, 1))
    delta[0, 0, 0] = 1 / 255
    assert log_emission(proc, delta) == log_floor(16)


def test_perfect_interpolation_match_scores_zero(rng):
    adv = random_image(rng, (6, 6, 1))
    proc = Procedure("IMG", "interpolation",
                     PatternModel(np.zeros((1, 1)), kind="image-interpolation"))
    # delta proportional to the adversarial example itself: |pearson| = 1
    assert log_emission(proc, adv.data.copy(), adv=adv.data) == pytest.approx(0.0, abs=1e-9)


def test_uniform_noise_closed_form(rng):
    proc = Procedure("NU", "noise", uniform_noise_model())
    delta = random_delta(rng, (5, 5, 2))
    d = delta.size
    assert log_emission(proc, delta) == pytest.approx(d * math.log(1 / DELTA_LEVELS), rel=1e-12)


def test_line_search_half_step_scores_zero():
    proc = Procedure("LS", "line-search", context_arity=2)
    prev = np.full((4, 4, 1), 2 / 255)
    cur = np.full((4, 4, 1), 1 / 255)
    assert log_emission(proc, cur, prev_delta=prev) == pytest.approx(0.0, abs=1e-12)


def test_line_search_missing_context_floors():
    proc = Procedure("LS", "line-search", context_arity=2)
    assert log_emission(proc, np.full((4, 4, 1), 1 / 255)) == log_floor(16)


def test_interpolation_missing_adv_floors():
    proc = Procedure("IMG", "interpolation",
                     PatternModel(np.zeros((1, 1)), kind="image-interpolation"))
    assert log_emission(proc, np.full((4, 4, 1), 1 / 255)) == log_floor(16)


def test_gaussian_model_beats_uniform_on_gaussian_draws(rng):
    sigma_levels = 12.0
    gauss = Procedure("NG", "noise", gaussian_noise_model(sigma_levels))
    uni = Procedure("NU", "noise", uniform_noise_model())
    margins = []
    for _ in range(100):
        delta = _quantized_gaussian_delta(rng, (8, 8, 1), sigma_levels / 255)
        margins.append(log_emission(gauss, delta) - log_emission(uni, delta))
    assert np.mean(margins) > 0.0


def test_emissions_always_finite_and_nonpositive(rng):
    procs = [
        Procedure("NULL", "null"),
        Procedure("LS", "line-search", context_arity=2),
        Procedure("IMG", "interpolation",
                  PatternModel(np.zeros((1, 1)), kind="image-interpolation")),
        Procedure("NG", "noise", gaussian_noise_model(5.0)),
    ]
    adv = random_image(rng, (4, 4, 1))
    for _ in range(50):
        delta = random_delta(rng, (4, 4, 1), scale=0.4)
        prev = random_delta(rng, (4, 4, 1), scale=0.4) if rng.random() < 0.5 else None
        use_adv = adv.data if rng.random() < 0.5 else None
        for proc in procs:
            val = log_emission(proc, delta, prev_delta=prev, adv=use_adv)
            assert np.isfinite(val)
            assert val <= 0.0


def test_pattern_score_monotone_in_match():
    # the truncated-exponential transform is strictly increasing in M
    from queryforensics.procedures import _pattern_score_to_log
    d = 64
    scores = [_pattern_score_to_log(m, d) for m in np.linspace(0, 1, 25)]
    assert all(b > a for a, b in zip(scores, scores[1:]))


def test_pattern_score_scale_invariant(rng):
    adv = random_image(rng, (6, 6, 1))
    proc = Procedure("IMG", "interpolation",
                     PatternModel(np.zeros((1, 1)), kind="image-interpolation"))
    delta = rng.normal(size=(6, 6, 1))
    base = log_emission(proc, delta, adv=adv.data)
    for a in (0.5, -2.0, 7.5):
        assert log_emission(proc, a * delta, adv=adv.data) == pytest.approx(base, abs=1e-9)


def test_noise_emission_additive_over_concatenation(rng):
    proc = Procedure("NG", "noise", gaussian_noise_model(8.0))
    d1 = random_delta(rng, (3, 5, 1))
    d2 = random_delta(rng, (4, 5, 1))
    combined = np.concatenate([d1, d2], axis=0)
    assert log_emission(proc, combined) == pytest.approx(
        log_emission(proc, d1) + log_emission(proc, d2), rel=1e-12)


# -- estimate_noise_pmf ----------------------------------------------------------

def test_pmf_of_all_zero_cluster_concentrates_at_zero():
    cluster = [np.zeros((8, 8, 1)) for _ in range(4)]
    model = estimate_noise_pmf(cluster)
    # float-rounding slack of one ulp on the 1 - 510*eps bound
    assert model.pmf[DELTA_LEVELS // 2] >= 1.0 - 510 * SMOOTHING_FLOOR - 1e-15


def test_pmf_of_uniform_levels_matches_uniform(rng):
    levels = rng.integers(-3, 4, size=(40, 16, 16, 1))
    cluster = [lv / 255.0 for lv in levels]
    model = estimate_noise_pmf(cluster)
    target = np.zeros(DELTA_LEVELS)
    center = DELTA_LEVELS // 2
    target[center - 3:center + 4] = 1.0 / 7.0
    tv = 0.5 * np.abs(model.pmf - target).sum()
    assert tv <= 0.05


def test_pmf_stability_between_same_process_clusters(rng):
    def draw_cluster():
        return [_quantized_gaussian_delta(rng, (16, 16, 1), 0.03) for _ in range(12)]
    m1 = estimate_noise_pmf(draw_cluster())
    m2 = estimate_noise_pmf(draw_cluster())
    tv = 0.5 * np.abs(m1.pmf - m2.pmf).sum()
    assert tv < 0.1


def test_pmf_empty_cluster_rejected():
    with pytest.raises(InvalidInputError):
        estimate_noise_pmf([])


def test_pmf_smoothing_spreads_with_wide_bandwidth():
    cluster = [np.zeros((8, 8, 1))]
    model = estimate_noise_pmf(cluster, bandwidth=6.0)
    center = DELTA_LEVELS // 2
    assert model.pmf[center] < 0.5
    assert model.pmf[center + 1] > 0.01


# -- extract_template --------------------------------------------------------------

def _stripe_delta(dims=(8, 8, 1), freq=2):
    h, w, c = dims
    cols = np.cos(2 * np.pi * freq * np.arange(w) / w)
    plane = np.tile(cols, (h, 1))[:, :, np.newaxis] * np.ones((1, 1, c))
    return np.rint(plane * 0.2 * 255) / 255.0


def test_template_of_stripe_cluster_has_axis_peaks():
    cluster = [_stripe_delta() for _ in range(5)]
    model = extract_template(cluster)
    mask = model.template
    assert mask.sum() > 0
    assert set(np.flatnonzero(mask.any(axis=1))) == {0}  # only spectral row 0 lights up


def test_template_of_single_delta_equals_binarized_psd(rng):
    delta = _stripe_delta(freq=3)
    model = extract_template([delta])
    assert np.array_equal(model.template, binarize(psd2(delta), 3.0).astype(float))


def test_template_of_zero_cluster_degenerate():
    with pytest.raises(DegenerateTemplateError):
        extract_template([np.zeros((8, 8, 1))])


# -- database ----------------------------------------------------------------------

def test_db_requires_unique_ids():
    with pytest.raises(InvalidInputError):
        ProcedureDB([Procedure("NULL", "null"), Procedure("NULL", "null")])


def test_kind_model_consistency():
    with pytest.raises(InvalidInputError):
        Procedure("N9", "noise")
    with pytest.raises(InvalidInputError):
        Procedure("LS", "line-search", uniform_noise_model(), context_arity=2)
    with pytest.raises(InvalidInputError):
        Procedure("LS", "line-search", context_arity=1)


def test_generic_db_validates():
    db = ProcedureDB.generic()
    db.validate()
    assert db.ids[:3] == ["NULL", "LS", "IMG"]


def test_validate_flags_missing_generics():
    db = ProcedureDB([Procedure("NULL", "null")])
    with pytest.raises(InvalidInputError):
        db.validate()


def test_next_id_continues_catalog():
    db = ProcedureDB.generic().with_procedure(
        Procedure("N2", "noise", uniform_noise_model()))
    assert db.next_id("N") == "N3"
    assert db.next_id("P") == "P1"


def test_db_json_round_trip(tmp_path, rng):
    db = ProcedureDB.generic()
    db = db.with_procedure(Procedure("N1", "noise", gaussian_noise_model(10.0)))
    db = db.with_procedure(Procedure("P1", "pattern", extract_template([_stripe_delta()])))
    path = tmp_path / "procedures.json"
    db.save(path)
    loaded = ProcedureDB.load(path)
    assert loaded.ids == db.ids
    orig_noise = db[3].model.pmf
    assert np.allclose(loaded[3].model.pmf, orig_noise)
    assert np.array_equal(loaded[4].model.template, db[4].model.template)
    assert loaded[4].model.binarize_factor == db[4].model.binarize_factor


# -- vectorized emission table ------------------------------------------------------

def test_emission_table_matches_scalar_path(rng):
    db = ProcedureDB.generic()
    db = db.with_procedure(Procedure("N1", "noise", gaussian_noise_model(12.0)))
    db = db.with_procedure(Procedure("P1", "pattern", extract_template([_stripe_delta()])))
    adv = random_image(rng, (8, 8, 1))
    deltas = np.stack([
        np.zeros((8, 8, 1)),
        random_delta(rng, (8, 8, 1)),
        _stripe_delta(),
        random_delta(rng, (8, 8, 1), scale=0.05),
    ])
    obs = ObservationSequence(deltas, adv)
    table = log_emission_table(db, obs.features())
    for t in range(deltas.shape[0]):
        prev = deltas[t - 1] if t > 0 else None
        for j, proc in enumerate(db):
            expected = log_emission(proc, deltas[t], prev_delta=prev, adv=adv.data)
            assert table[t, j] == pytest.approx(expected, rel=1e-9, abs=1e-9), \
                (t, proc.id)

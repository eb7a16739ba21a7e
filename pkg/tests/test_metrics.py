import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbnet.errors import NoValidPixelsError, ShapeError
from kbnet.metrics import CSV_HEADER, EvalResult, evaluate, mean_result


def test_exact_prediction_is_zero():
    gt = np.random.default_rng(0).uniform(0.5, 4.5, (1, 1, 8, 8))
    r = evaluate(gt.copy(), gt, cap=(0.2, 5.0))
    assert r.as_tuple()[:4] == (0.0, 0.0, 0.0, 0.0) and r.n_pixels == 64


def test_constant_millimetre_offset():
    gt = np.random.default_rng(1).uniform(0.5, 4.5, (8, 8))
    r = evaluate(gt + 0.001, gt)
    assert r.mae == pytest.approx(1.0, rel=1e-9)
    assert r.rmse == pytest.approx(1.0, rel=1e-9)


def test_two_pixel_worked_example():
    r = evaluate(np.array([1.1, 2.2]), np.array([1.0, 2.0]), cap=(0.2, 5.0))
    assert r.mae == pytest.approx(150.0, rel=1e-12)
    assert r.rmse == pytest.approx(158.114, abs=5e-4)
    assert r.imae == pytest.approx(68.18, abs=5e-3)
    assert r.irmse == pytest.approx(71.87, abs=5e-3)


def test_pixels_outside_cap_or_invalid_are_ignored():
    gt = np.array([1.0, 2.0, 0.0, 0.1, 9.0, np.nan])
    pred = np.array([1.1, 2.2, 5.0, 3.0, 1.0, 4.0])
    r = evaluate(pred, gt, cap=(0.2, 5.0))
    assert r.n_pixels == 2 and r.mae == pytest.approx(150.0)
    valid = np.array([True, False, True, True, True, True])
    assert evaluate(pred, gt, cap=(0.2, 5.0), valid=valid).mae == pytest.approx(100.0)


def test_prediction_is_not_clipped():
    r = evaluate(np.array([10.0]), np.array([1.0]), cap=(0.2, 5.0))
    assert r.mae == pytest.approx(9000.0)


def test_errors():
    with pytest.raises(NoValidPixelsError):
        evaluate(np.ones(3), np.zeros(3))
    with pytest.raises(ShapeError):
        evaluate(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        evaluate(np.ones(3), np.ones(3), cap=(0.0, 5.0))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 10.0))
def test_scale_property(seed, s):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 4.0, 50)
    pred = gt * rng.uniform(0.7, 1.3, 50)
    a = evaluate(pred, gt, cap=(1e-6, 1e6))
    b = evaluate(pred * s, gt * s, cap=(1e-6, 1e6))
    assert b.mae == pytest.approx(a.mae * s, rel=1e-9)
    assert b.rmse == pytest.approx(a.rmse * s, rel=1e-9)
    assert b.imae == pytest.approx(a.imae / s, rel=1e-9)
    assert b.irmse == pytest.approx(a.irmse / s, rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_power_mean_and_restriction(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.0, 8.0, 40)
    gt[rng.random(40) < 0.2] = 0.0
    gt[0] = 1.0
    pred = rng.uniform(0.1, 8.0, 40)
    r = evaluate(pred, gt, cap=(0.2, 5.0))
    assert r.rmse >= r.mae - 1e-9 and r.irmse >= r.imae - 1e-9
    assert min(r.as_tuple()) >= 0
    # scribbling over excluded pixels changes nothing
    outside = (gt < 0.2) | (gt > 5.0)
    pred2 = np.where(outside, rng.uniform(0.1, 100, 40), pred)
    assert evaluate(pred2, gt, cap=(0.2, 5.0)) == r


def test_csv_line_and_mean():
    r1 = EvalResult(100.0, 200.0, 10.0, 20.0, 5)
    r2 = EvalResult(300.0, 400.0, 30.0, 40.0, 7)
    m = mean_result([r1, r2])
    assert m.as_tuple() == (200.0, 300.0, 20.0, 30.0, 12)
    assert len(r1.to_csv_line().split(",")) == len(CSV_HEADER.split(","))

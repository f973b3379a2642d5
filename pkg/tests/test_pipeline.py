import numpy as np
import pytest

from cfdiff.conditions import Condition
from cfdiff.pipeline import (
    box_blur,
    counterfactual,
    decode,
    encode,
    from_model_range,
    heatmap,
    segment,
    to_model_range,
)
from cfdiff.sampler import SamplerConfig
from cfdiff.schedule import build_schedule

SCHED = build_schedule(1000)


def constant_mock(value):
    return lambda x, c, t: np.full_like(x, value)


def per_condition_mock(values):
    return lambda x, c, t: np.full_like(x, values[c])


def test_encode_depth_zero_is_identity(rng):
    x0 = rng.standard_normal((2, 2, 8, 8))
    cfg = SamplerConfig(L=10, normalization="none")
    out, visited = encode(x0, cfg, constant_mock(0.3), SCHED, depth=0)
    assert np.array_equal(out, x0)
    assert list(visited) == [0]


def test_encode_matches_two_step_hand_iteration(rng):
    # T=11, 2 steps: grid [0, 5, 10]; constant eps; iterate the recurrence by hand
    sched = build_schedule(11, kind="constant", beta_start=0.2)
    cfg = SamplerConfig(L=2, ddim_steps=2, normalization="none")
    e = 0.37
    x0 = rng.standard_normal((1, 1, 2, 2))

    a = sched.alphas_cum
    x1 = np.sqrt(a[5]) * (x0 - np.sqrt(1 - a[0]) * e) / np.sqrt(a[0]) + np.sqrt(1 - a[5]) * e
    x2 = np.sqrt(a[10]) * (x1 - np.sqrt(1 - a[5]) * e) / np.sqrt(a[5]) + np.sqrt(1 - a[10]) * e

    out, visited = encode(x0, cfg, constant_mock(e), sched)
    assert list(visited) == [0, 5, 10]
    assert np.allclose(out, x2, rtol=0, atol=1e-12)


def test_encode_deterministic(rng):
    x0 = rng.standard_normal((1, 2, 8, 8))
    cfg = SamplerConfig(L=7, normalization="dynamic")
    a, _ = encode(x0, cfg, constant_mock(0.2), SCHED)
    b, _ = encode(x0, cfg, constant_mock(0.2), SCHED)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("L", [1, 10, 100])
def test_mock_invertibility(rng, L):
    x0 = rng.standard_normal((2, 2, 8, 8))
    cfg = SamplerConfig(w=1.0, L=L, ddim_steps=100, normalization="none")
    mock = constant_mock(0.41)
    latent, _ = encode(x0, cfg, mock, SCHED)
    back, _ = decode(latent, Condition.HEALTHY, cfg, mock, SCHED)
    rms = np.sqrt(np.mean((back - x0) ** 2))
    assert rms < 1e-6


def test_condition_dependent_mock_inverts_at_w0(rng):
    # w=0 decodes with the null branch only, matching the encoding exactly
    x0 = rng.standard_normal((1, 2, 8, 8))
    cfg = SamplerConfig(w=0.0, L=20, normalization="none")
    mock = per_condition_mock({Condition.NULL: 0.1, Condition.HEALTHY: 5.0, Condition.UNHEALTHY: -3.0})
    latent, _ = encode(x0, cfg, mock, SCHED)
    back, _ = decode(latent, Condition.HEALTHY, cfg, mock, SCHED)
    assert np.allclose(back, x0, atol=1e-10)


def test_decode_w0_ignores_condition(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    cfg = SamplerConfig(w=0.0, L=5, normalization="dynamic")
    mock = per_condition_mock({Condition.NULL: 0.1, Condition.HEALTHY: 4.0, Condition.UNHEALTHY: -4.0})
    a, _ = decode(x, Condition.HEALTHY, cfg, mock, SCHED)
    b, _ = decode(x, Condition.UNHEALTHY, cfg, mock, SCHED)
    assert np.array_equal(a, b)


def test_decode_null_rejected(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    with pytest.raises(ValueError):
        decode(x, Condition.NULL, SamplerConfig(L=2), constant_mock(0.0), SCHED)


def test_decode_grid_is_reversed_encode_grid(rng):
    x0 = rng.standard_normal((1, 2, 8, 8))
    cfg = SamplerConfig(L=13, normalization="none")
    result = counterfactual(x0, cfg, constant_mock(0.0), SCHED)
    assert list(result.decode_timesteps) == list(result.encode_timesteps[::-1])


def test_heatmap_zero_for_identical(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert np.array_equal(heatmap(x, x), np.zeros((2, 1, 4, 4)))


def test_heatmap_hand_mean():
    x0 = np.zeros((1, 2, 1, 1))
    xcf = np.zeros((1, 2, 1, 1))
    xcf[0, 0] = 1.0
    xcf[0, 1] = -3.0
    assert heatmap(x0, xcf)[0, 0, 0, 0] == 2.0


def test_heatmap_symmetry(rng):
    a = rng.standard_normal((2, 2, 4, 4))
    b = rng.standard_normal((2, 2, 4, 4))
    assert np.array_equal(heatmap(a, b), heatmap(b, a))


def test_heatmap_shape_mismatch(rng):
    with pytest.raises(ValueError):
        heatmap(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 4, 5)))


def test_counterfactual_shapes_and_invariants(rng):
    x0 = rng.standard_normal((3, 2, 8, 8))
    cfg = SamplerConfig(w=1.5, L=4)
    result = counterfactual(x0, cfg, per_condition_mock({c: 0.1 * int(c) for c in Condition}), SCHED)
    assert result.counterfactual.shape == x0.shape
    assert result.heatmap.shape == (3, 1, 8, 8)
    assert np.all(result.heatmap >= 0)


def test_segment_threshold_extremes(rng):
    x0 = rng.standard_normal((1, 2, 8, 8))
    cfg = SamplerConfig(w=2.0, L=3)
    mock = per_condition_mock({Condition.NULL: 0.0, Condition.HEALTHY: 0.5, Condition.UNHEALTHY: 0.1})
    result, mask_inf = segment(x0, cfg, np.inf, mock, SCHED)
    assert not mask_inf.any()
    _, mask_zero = segment(x0, cfg, 0.0, mock, SCHED)
    assert np.array_equal(mask_zero, result.heatmap > 0)
    with pytest.raises(ValueError):
        segment(x0, cfg, -0.1, mock, SCHED)


def test_model_range_roundtrip(rng):
    x = rng.random((2, 2, 4, 4)) * 1.5
    assert np.allclose(from_model_range(to_model_range(x)), x, atol=1e-12)
    assert to_model_range(np.array(0.0)) == -1.0
    assert to_model_range(np.array(1.5)) == 1.0
    assert np.all(np.abs(to_model_range(np.array([0.0, 0.7, 1.5]))) <= 1.0)


def test_box_blur_constant_preserved():
    x = np.full((1, 1, 6, 6), 3.5)
    assert np.allclose(box_blur(x, 3), x)
    with pytest.raises(ValueError):
        box_blur(x, 2)


def test_counterfactual_rejects_nonfinite(rng):
    x0 = rng.standard_normal((1, 2, 8, 8))
    x0[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        counterfactual(x0, SamplerConfig(L=2), constant_mock(0.0), SCHED)

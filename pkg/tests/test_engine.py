"""Weight mapping, conversion, calibration, and engine execution tests."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xbarsim.circuit import CrossbarSolver, oracle_solve
from xbarsim.config import CrossbarConfig
from xbarsim.engine import (VmmEngine, build_engine, convert,
                            default_sample_inputs, evaluate_engine,
                            get_cali_para, map_weights,
                            optimize_conversion_signal)
from xbarsim.errors import ValidationError
from xbarsim.metrics import gen_kernel

IDEAL = dict(r_wire=0.0, r_in=0.0, r_out=0.0)


def ideal_config(rows, cols):
    return CrossbarConfig(rows, cols, **IDEAL)


def test_map_weights_symmetric_example():
    config = CrossbarConfig(2, 2)
    g, mapping = map_weights([[-1.0, 0.0], [0.0, 1.0]], config)
    mid = (config.g_min + config.g_max) / 2.0
    assert mapping.c == 1.0
    assert mapping.beta == pytest.approx((config.g_max - config.g_min) / 2.0)
    assert np.allclose(g, [[config.g_min, mid], [mid, config.g_max]])


def test_map_weights_all_zero():
    config = CrossbarConfig(3, 3)
    g, mapping = map_weights(np.zeros((3, 3)), config)
    assert mapping.c == 0.0
    assert np.all(g == config.g_min)


def test_map_weights_ternary_three_levels():
    config = CrossbarConfig(6, 6)
    w = gen_kernel(3, (6, 6), seed=0, zero_fraction=0.4)
    g, _ = map_weights(w, config)
    mid = (config.g_min + config.g_max) / 2.0
    levels = np.unique(np.round(g, 12))
    assert np.allclose(levels, np.round([config.g_min, mid, config.g_max], 12))


def test_map_weights_pads_unused_cells_with_g_min():
    config = CrossbarConfig(4, 4)
    g, _ = map_weights(np.ones((2, 2)), config)
    assert np.all(g[2:, :] == config.g_min)
    assert np.all(g[:, 2:] == config.g_min)


def test_map_weights_validation():
    config = CrossbarConfig(2, 2)
    with pytest.raises(ValidationError):
        map_weights(np.ones((3, 2)), config)
    with pytest.raises(ValidationError):
        map_weights([[np.nan, 0.0], [0.0, 0.0]], config)
    with pytest.raises(ValidationError):
        map_weights(np.ones((2, 2)), config, x_max=0.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 1000))
def test_shift_identity_exact(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(5, 3))
    x = rng.uniform(0.0, 1.0, size=5)
    c = max(0.0, -A.min())
    assert np.allclose(x @ (A + c) - c * x.sum(), x @ A, rtol=0, atol=1e-12)


def test_convert_zero_parasitics_is_identity():
    config = ideal_config(4, 3)
    g, _ = map_weights(gen_kernel(1, (4, 3), 0), config)
    result = convert(config, g, np.full(4, 0.02))
    assert np.array_equal(result.g_device, g)
    assert result.converged
    assert np.all(result.col_scale == 1.0)


def test_convert_column_outputs_match_scaled_targets():
    config = CrossbarConfig(144, 16)
    g, _ = map_weights(gen_kernel(1, (3, 3, 16, 16), 0).reshape(144, 16), config)
    v_conv = np.full(144, 0.1 * config.v_sense_max)
    result = convert(config, g, v_conv)
    i_out = CrossbarSolver(config, result.g_device).solve(v_conv).i_out
    target = result.col_scale * (v_conv @ g)
    assert np.abs(i_out - target).max() / np.abs(target).max() <= 1e-4
    assert result.col_error <= 1e-4


def test_convert_small_unclamped_array_converges_tightly():
    config = CrossbarConfig(8, 4)
    rng = np.random.default_rng(1)
    # mid-range targets leave compensation headroom on both sides
    g = rng.uniform(config.g_min * 3, config.g_max * 0.7, size=(8, 4))
    result = convert(config, g, np.full(8, 0.02))
    assert result.converged
    assert result.col_error <= 1e-6


def test_convert_stays_in_device_range():
    config = CrossbarConfig(32, 8)
    g, _ = map_weights(gen_kernel(1, (32, 8), 2), config)
    result = convert(config, g, np.full(32, 0.02))
    assert result.g_device.min() >= config.g_min - 1e-18
    assert result.g_device.max() <= config.g_max + 1e-18


def test_convert_compensates_upward_under_wire_loss():
    config = CrossbarConfig(8, 4)
    rng = np.random.default_rng(3)
    g = rng.uniform(config.g_min * 2, config.g_max * 0.5, size=(8, 4))
    result = convert(config, g, np.full(8, 0.02))
    interior = (result.g_device > config.g_min) & (result.g_device < config.g_max)
    assert np.all(result.g_device[interior] >= g[interior] - 1e-15)


def test_convert_branch_method_matches_targets():
    config = CrossbarConfig(16, 4)
    g, _ = map_weights(gen_kernel(1, (16, 4), 4), config)
    v_conv = np.full(16, 0.02)
    result = convert(config, g, v_conv, method="branch")
    i_out = CrossbarSolver(config, result.g_device).solve(v_conv).i_out
    target = result.col_scale * (v_conv @ g)
    assert np.abs(i_out - target).max() / np.abs(target).max() <= 1e-5


def test_convert_absolute_targets_report_saturation():
    config = CrossbarConfig(288, 32)
    g, _ = map_weights(gen_kernel(1, (3, 3, 32, 32), 5).reshape(288, 32), config)
    result = convert(config, g, np.full(288, config.v_sense_max),
                     method="branch", target_scale=1.0, max_iter=20)
    # unreachable absolute targets: not converged, many ceiling-pinned devices
    assert not result.converged
    assert result.clipped_high > 0


def test_convert_validation():
    config = CrossbarConfig(4, 4)
    g, _ = map_weights(np.zeros((4, 4)), config)
    with pytest.raises(ValidationError):
        convert(config, g, np.full(3, 0.02))
    with pytest.raises(ValidationError):
        convert(config, g, np.full(4, 0.02), method="nope")
    with pytest.raises(ValidationError):
        convert(config, g, np.zeros(4), method="branch")


def test_calibration_ideal_engine_nominal_gain_zero_offset():
    A = gen_kernel(1, (12, 5), 6)
    engine = build_engine(A, config=ideal_config(12, 5), seed=0)
    nominal = 1.0 / (engine.mapping.alpha * engine.mapping.beta)
    assert np.allclose(engine.cali.gain, nominal, rtol=1e-9)
    assert np.abs(engine.cali.offset).max() <= 1e-9 * nominal
    assert engine.cali.sample_count == 10


def test_calibration_two_point_line_single_cell():
    engine = build_engine(np.array([[0.5]]), calibrate=False, seed=0)
    samples = np.array([[0.2], [0.9]])
    cali = get_cali_para(engine, samples)
    i = engine.corrected_currents(samples)[:, 0]
    y = samples[:, 0] * (0.5 + engine.mapping.c)
    gain = (y[1] - y[0]) / (i[1] - i[0])
    assert cali.gain[0] == pytest.approx(gain, rel=1e-12)
    assert cali.offset[0] == pytest.approx(y[0] - gain * i[0], rel=1e-9)


def test_calibration_improves_on_uncorrected_conversion():
    # absolute-target conversion leaves a systematic wire-loss attenuation
    # that the fitted per-column readout absorbs
    A = gen_kernel(1, (3, 3, 16, 16), 7).reshape(144, 16)
    X = default_sample_inputs(144, count=64, seed=1)
    kwargs = dict(sample_inputs=X, seed=0, method="branch", target_scale=1.0,
                  signal_fraction=1.0)
    cal = build_engine(A, **kwargs)
    raw = build_engine(A, calibrate=False, **kwargs)
    assert evaluate_engine(cal, X).mean < evaluate_engine(raw, X).mean


def test_calibration_degenerate_column_flagged():
    # with no negative weights the shift c is 0, so an all-zero column
    # carries zero current for every sample and cannot be fitted
    A = np.array([[0.5, 0.0], [0.25, 0.0]])
    engine = build_engine(A, config=ideal_config(2, 2), calibrate=False, seed=0)
    samples = np.array([[0.1, 0.2], [0.4, 0.3], [0.7, 0.1]])
    cali = get_cali_para(engine, samples)
    assert cali.degenerate == [1]
    assert np.isfinite(cali.gain).all()
    assert cali.gain[1] != 0.0
    assert cali.offset[1] == pytest.approx(0.0, abs=1e-12)


def test_execute_ideal_engine_matches_double_loop_oracle():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(10, 4))
    engine = build_engine(A, config=ideal_config(10, 4), seed=0)
    X = rng.uniform(0.0, 1.0, size=(6, 10))
    got = engine.execute_batch(X)
    ref = np.zeros((6, 4))
    for k in range(6):
        for j in range(4):
            for i in range(10):
                ref[k, j] += X[k, i] * A[i, j]
    scale = np.abs(ref).max()
    assert np.abs(got - ref).max() / scale <= 1e-9


def test_execute_zero_input_gives_zero_output():
    A = gen_kernel(1, (8, 3), 9)
    engine = build_engine(A, config=ideal_config(8, 3), seed=0)
    y = engine.execute(np.zeros(8))
    assert np.abs(y).max() <= 1e-6


def test_execute_validates_inputs():
    engine = build_engine(gen_kernel(1, (4, 2), 10), seed=0)
    with pytest.raises(ValidationError):
        engine.execute([0.1, 0.2, 0.3])
    with pytest.raises(ValidationError):
        engine.execute([0.1, 0.2, 0.3, 1.5])
    with pytest.raises(ValidationError):
        engine.execute([0.1, -0.2, 0.3, 0.4])


def test_engine_with_padded_array_matches_product():
    A = gen_kernel(1, (5, 3), 11)
    config = ideal_config(8, 6)   # larger than the weights
    engine = build_engine(A, config=config, seed=0)
    rng = np.random.default_rng(12)
    X = rng.uniform(0.0, 1.0, size=(4, 5))
    got = engine.execute_batch(X)
    ref = X @ A
    assert np.abs(got - ref).max() / np.abs(ref).max() <= 1e-9


def test_engine_deterministic_across_rebuilds():
    A = gen_kernel(1, (16, 4), 13)
    X = default_sample_inputs(16, count=20, seed=2)
    e1 = build_engine(A, sample_inputs=X, dac_bits=8, adc_bits=8, seed=5)
    e2 = build_engine(A, sample_inputs=X, dac_bits=8, adc_bits=8, seed=5)
    assert np.array_equal(e1.cali.gain, e2.cali.gain)
    assert np.array_equal(e1.execute_batch(X), e2.execute_batch(X))


def test_engine_serialization_round_trip(tmp_path):
    A = gen_kernel(1, (12, 4), 14)
    engine = build_engine(A, dac_bits=8, adc_bits=8, seed=0)
    json_path, blob_path = engine.save(tmp_path / "engine.json")
    clone = VmmEngine.load(json_path)
    X = default_sample_inputs(12, count=8, seed=3)
    assert np.array_equal(engine.execute_batch(X), clone.execute_batch(X))
    clone.save(tmp_path / "clone.json")
    assert (tmp_path / "engine.bin").read_bytes() == (tmp_path / "clone.bin").read_bytes()


def test_engine_load_detects_corruption(tmp_path):
    engine = build_engine(gen_kernel(1, (4, 2), 15), seed=0)
    json_path, blob_path = engine.save(tmp_path / "engine.json")
    raw = bytearray(blob_path.read_bytes())
    raw[0] ^= 0xFF
    blob_path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError):
        VmmEngine.load(json_path)


def test_optimize_signal_zero_parasitics_tie_breaks_to_largest():
    A = gen_kernel(1, (16, 4), 16)
    frac, report = optimize_conversion_signal(
        A, config=ideal_config(16, 4), seed=0,
        amplitudes=(1.0, 0.1, 0.001))
    assert frac == 1.0
    assert len(report) == 3


def test_improvement_over_direct_mapping():
    A = gen_kernel(1, (3, 3, 16, 16), 17).reshape(144, 16)
    X = default_sample_inputs(144, count=64, seed=4)
    improved = build_engine(A, sample_inputs=X, seed=0)
    direct = build_engine(A, sample_inputs=X, seed=0, max_iter=0,
                          calibrate=False)
    assert evaluate_engine(improved, X).mean < evaluate_engine(direct, X).mean

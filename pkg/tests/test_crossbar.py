import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmxbar.crossbar import (
    G_OFF,
    G_ON,
    IDEAL_PERIPHERY,
    SPAN,
    ConductanceProgram,
    CrossbarLayout,
    DeviceModel,
    PeripheryModel,
    XbarState,
    block_is_symmetric,
    converter,
    default_p_stuck,
    deploy_model,
    expand_complex,
    expand_to_block,
    heatmap_csv,
    load_program,
    map_kernel,
    merge_currents,
    overlay,
    program,
    save_program,
    split_signal,
    weight_to_pair,
    xbar_kernel_step,
    xbar_run,
    xbar_vmm,
)
from ssmxbar.errors import CapacityError, LayoutError, RangeError
from ssmxbar.ssm import DiscreteKernel, ModelConfig, init_model, kernel_run
from ssmxbar.train import default_quant, predict_quantized


def random_kernel(rng, N, radius=0.97):
    a_bar = rng.uniform(0.3, radius, N) * np.exp(1j * rng.uniform(-np.pi, np.pi, N))
    b_bar = 0.1 * (rng.standard_normal(N) + 1j * rng.standard_normal(N))
    c_bar = rng.uniform(-1, 1, N) + 1j * rng.uniform(-1, 1, N)
    return DiscreteKernel(a_bar, b_bar, c_bar)


def raw_state(G):
    cp = ConductanceProgram(np.asarray(G, float), 1.0, CrossbarLayout())
    return XbarState(cp, cp.target.copy(), np.zeros(cp.target.shape, bool))


# --- expansion ----------------------------------------------------------------

def test_expand_complex_examples():
    np.testing.assert_array_equal(expand_complex(1), [[1, 0], [0, 1]])
    np.testing.assert_array_equal(expand_complex(1j), [[0, -1], [1, 0]])


@settings(max_examples=100)
@given(mr=st.floats(-5, 5), mi=st.floats(-5, 5), vr=st.floats(-5, 5), vi=st.floats(-5, 5))
def test_expand_complex_is_complex_product(mr, mi, vr, vi):
    out = expand_complex(complex(mr, mi)) @ np.array([vr, vi])
    prod = complex(mr, mi) * complex(vr, vi)
    np.testing.assert_allclose(out, [prod.real, prod.imag], atol=1e-12)


def test_weight_to_pair_examples():
    assert weight_to_pair(0.0, 2.0) == (7.0, 7.0)
    assert weight_to_pair(2.0, 2.0) == (200.0, 7.0)
    assert weight_to_pair(-1.0, 2.0) == pytest.approx((7.0, 103.5))


def test_weight_to_pair_range_error():
    with pytest.raises(RangeError):
        weight_to_pair(1.5, 1.0)


def test_zero_block():
    np.testing.assert_array_equal(expand_to_block(0, 1.0), np.full((4, 4), 7.0))


def test_full_scale_real_block():
    b = expand_to_block(3.0, 3.0)
    np.testing.assert_array_equal(np.diag(b), 200.0)
    off = b[~np.eye(4, dtype=bool)]
    np.testing.assert_array_equal(off, 7.0)


def test_block_differential_readout_is_complex_product():
    rng = np.random.default_rng(2)
    w_max = 2.5
    for _ in range(20):
        m = complex(*rng.uniform(-w_max, w_max, 2))
        v = complex(*rng.uniform(-1, 1, 2))
        block = expand_to_block(m, w_max)
        i = block @ split_signal(np.array([v]))
        got = merge_currents(i)[0]
        np.testing.assert_allclose(got, SPAN / w_max * m * v, rtol=1e-12, atol=1e-12)


def test_block_symmetry_detector():
    assert block_is_symmetric(expand_to_block(0.3 - 0.7j, 1.0))
    bad = expand_to_block(0.3 - 0.7j, 1.0)
    bad[2, 0], bad[2, 1] = bad[2, 1], bad[2, 0]
    assert not block_is_symmetric(bad)


# --- layout / mapping -------------------------------------------------------------

def test_layout_capacity():
    CrossbarLayout(N=15)
    with pytest.raises(LayoutError):
        CrossbarLayout(N=16)


def test_layout_bands_disjoint():
    lay = CrossbarLayout(N=14)
    assert lay.input_rows.stop <= lay.state_rows.start
    assert lay.state_cols.stop <= lay.output_cols.start


def test_map_n14_occupies_60x60():
    cp = map_kernel(random_kernel(np.random.default_rng(0), 14))
    rows, cols = np.nonzero(cp.target)
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (0, 59, 0, 59)
    assert np.all(cp.target[60:, :] == 0) and np.all(cp.target[:, 60:] == 0)


def test_map_zero_kernel():
    z = np.zeros(1, complex)
    cp = map_kernel(DiscreteKernel(z, z, z))
    np.testing.assert_array_equal(cp.target[cp.mask], 7.0)
    np.testing.assert_array_equal(cp.target[~cp.mask], 0.0)


def test_map_block_structure_and_range():
    dk = random_kernel(np.random.default_rng(5), 14)
    cp = map_kernel(dk)
    for name in "ABC":
        for n in range(14):
            assert block_is_symmetric(cp.block(name, n))
    prog = cp.target[cp.mask]
    assert prog.min() >= G_OFF - 1e-9 and prog.max() <= G_ON + 1e-9
    back = cp.kernel()
    np.testing.assert_allclose(back.a_bar, dk.a_bar, atol=1e-12)
    np.testing.assert_allclose(back.b_bar, dk.b_bar, atol=1e-12)
    np.testing.assert_allclose(back.c_bar, dk.c_bar, atol=1e-12)


def test_map_layout_mismatch():
    with pytest.raises(LayoutError):
        map_kernel(random_kernel(np.random.default_rng(0), 4), CrossbarLayout(N=5))


def test_overlay_counts():
    cp = map_kernel(random_kernel(np.random.default_rng(0), 14))
    counts = overlay(cp)["cell_counts"]
    assert counts == {"A": 4 * 4 * 14, "B": 4 * 4 * 14, "C": 4 * 4 * 14}


def test_program_json_roundtrip(tmp_path):
    cp = map_kernel(random_kernel(np.random.default_rng(1), 14))
    save_program(tmp_path / "p.json", cp)
    back = load_program(tmp_path / "p.json")
    np.testing.assert_allclose(back.target, cp.target, atol=1e-9)
    assert back.w_max == cp.w_max and back.layout == cp.layout


def test_heatmap_grid_shape():
    cp = map_kernel(random_kernel(np.random.default_rng(1), 14))
    rows = heatmap_csv(cp.target).strip().split("\n")
    assert len(rows) == 64 and all(len(r.split(",")) == 64 for r in rows)


# --- programming --------------------------------------------------------------

def test_ideal_programming():
    cp = map_kernel(random_kernel(np.random.default_rng(1), 14))
    np.testing.assert_array_equal(program(cp, DeviceModel(), 3).actual, cp.target)


def test_noisy_programming_reproducible_and_bounded():
    cp = map_kernel(random_kernel(np.random.default_rng(1), 14))
    dev = DeviceModel(sigma_write=15.0, p_stuck=0.01)
    a, b = program(cp, dev, 42), program(cp, dev, 42)
    np.testing.assert_array_equal(a.actual, b.actual)
    assert not np.array_equal(a.actual, program(cp, dev, 43).actual)
    assert a.actual.min() >= 0 and a.actual.max() <= 300
    np.testing.assert_array_equal(a.actual[~cp.mask], 0)
    big = program(cp, DeviceModel(sigma_write=500.0), 1).actual
    assert big.min() >= 0 and big.max() <= 300


def test_default_stuck_rate_gives_one_to_three_per_kernel():
    cp = map_kernel(random_kernel(np.random.default_rng(1), 14))
    dev = DeviceModel(p_stuck=default_p_stuck(cp.layout))
    counts = [program(cp, dev, s).stuck.sum() for s in range(2000)]
    assert 1.0 <= np.mean(counts) <= 3.0
    assert np.mean(counts) == pytest.approx(2.0, abs=0.15)
    st_ = program(cp, dev, int(np.argmax(counts)))
    np.testing.assert_array_equal(st_.actual[st_.stuck], 300.0)


# --- analog execution -------------------------------------------------------------

def test_vmm_ohms_law():
    G = np.zeros((64, 64))
    G[:2, :2] = 100.0
    st_ = raw_state(G)
    v = np.zeros(64)
    v[:2] = 0.1
    i = xbar_vmm(st_, v)
    np.testing.assert_allclose(i[:2], 20.0)
    np.testing.assert_array_equal(xbar_vmm(st_, np.zeros(64)), 0)


def test_vmm_clips_and_counts():
    st_ = raw_state(np.full((64, 64), 10.0))
    v = np.zeros(64)
    v[0] = 0.5
    i = xbar_vmm(st_, v, v_max=0.2)
    np.testing.assert_allclose(i, 2.0)
    assert st_.clip_events == 1


@settings(max_examples=50)
@given(g=st.floats(7, 200), cm=st.floats(0, 0.2))
def test_common_mode_cancellation(g, cm):
    block = np.full((4, 4), g)  # g+ == g- everywhere
    i = np.full(4, cm) @ block
    assert merge_currents(i)[0] == pytest.approx(0, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(-2, 2))
def test_differential_linearity(seed, alpha):
    rng = np.random.default_rng(seed)
    cp = map_kernel(random_kernel(rng, 14))
    st_ = program(cp, DeviceModel(), 0)
    s1 = rng.uniform(-0.1, 0.1, 15) + 1j * rng.uniform(-0.1, 0.1, 15)
    s2 = rng.uniform(-0.1, 0.1, 15) + 1j * rng.uniform(-0.1, 0.1, 15)

    def drive(s):
        v = np.zeros(64)
        v[:60] = split_signal(s)
        return merge_currents(v @ st_.actual)[:15]

    np.testing.assert_allclose(drive(s1 + alpha * s2), drive(s1) + alpha * drive(s2), atol=1e-9)


def test_zero_input_zero_state():
    cp = map_kernel(random_kernel(np.random.default_rng(0), 14))
    st_ = program(cp, DeviceModel(), 0).reset(1)
    st_, y = xbar_kernel_step(st_, IDEAL_PERIPHERY, 0.0)
    assert y == 0
    np.testing.assert_array_equal(st_.voltages, 0)


def test_ideal_array_equals_delayed_digital_kernel():
    rng = np.random.default_rng(7)
    dk = random_kernel(rng, 14)
    st_ = program(map_kernel(dk), DeviceModel(), 0)
    st_.scale = 0.2 / 20
    u = rng.uniform(-1, 1, 871)
    y = xbar_run(st_, IDEAL_PERIPHERY, u)[0]
    ref = kernel_run(dk, u)
    assert y[0] == 0
    assert np.max(np.abs(y[1:] - ref)) <= 1e-6 * np.max(np.abs(ref))


def test_converter_levels():
    v = np.linspace(-0.3, 0.3, 1001)
    q = converter(v, 8, 0.2)
    assert len(np.unique(q)) == 255
    assert np.max(np.abs(q)) == pytest.approx(0.2)
    np.testing.assert_array_equal(converter(v, None, 0.2), v)


def test_saturation_keeps_voltages_in_range():
    rng = np.random.default_rng(3)
    dk = random_kernel(rng, 14)
    dk.a_bar = dk.a_bar / np.abs(dk.a_bar) * 1.05  # unstable on purpose
    st_ = program(map_kernel(dk), DeviceModel(), 0)
    st_.scale = 0.2
    per = PeripheryModel()
    st_.reset(1)
    for t in range(300):
        xbar_kernel_step(st_, per, 1.0)
        assert np.all(np.abs(st_.voltages) <= per.v_max + 1e-15)
    assert st_.clip_events > 0


# --- deployment -------------------------------------------------------------------

def test_deploy_capacity():
    p = init_model(ModelConfig(H=4, N=2, sequence_length=8), 0)
    with pytest.raises(CapacityError):
        deploy_model(p, DeviceModel(), IDEAL_PERIPHERY, 0)


def test_ideal_deploy_matches_software():
    p = init_model(ModelConfig(H=3, N=14, sequence_length=64), 1)
    q = default_quant(2)
    x = np.random.default_rng(0).uniform(-1, 1, (12, 64))
    dm = deploy_model(p, DeviceModel(), IDEAL_PERIPHERY, 0, quant=q)
    from ssmxbar.train import forward_quantized

    ref, _ = forward_quantized(p, q, x)
    np.testing.assert_allclose(dm.forward(x), ref, rtol=1e-9, atol=1e-12)
    np.testing.assert_array_equal(dm.predict(x), predict_quantized(p, q, x))


def test_calibrated_ranges_avoid_clipping_on_calibration_set():
    p = init_model(ModelConfig(H=3, N=14, sequence_length=64), 1)
    q = default_quant(2)
    x = np.random.default_rng(0).uniform(-1, 1, (8, 64))
    dm = deploy_model(p, DeviceModel(), PeripheryModel(adc_bits=None), 0, quant=q, calibration=x)
    dm.forward(x)
    assert dm.clip_events == 0


def test_stuck_restoration_is_exact():
    p = init_model(ModelConfig(H=3, N=14, sequence_length=64), 2)
    q = default_quant(2)
    x = np.random.default_rng(1).uniform(-1, 1, (6, 64))
    ideal = deploy_model(p, DeviceModel(), IDEAL_PERIPHERY, 0, quant=q)
    faulty = deploy_model(p, DeviceModel(p_stuck=0.01), IDEAL_PERIPHERY, 0, quant=q)
    assert sum(s.stuck.sum() for s in faulty.arrays) > 0
    assert not np.allclose(faulty.forward(x), ideal.forward(x))
    for s in faulty.arrays:
        s.restore_stuck()
    np.testing.assert_array_equal(faulty.forward(x), ideal.forward(x))

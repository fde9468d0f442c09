import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from gorender.errors import InvalidInput
from gorender.evalharness import PSNR_CAP, Row, Table, evaluate, g_ablation, luminance, psnr, robustness_sweep, ssim


def test_psnr_examples():
    a = np.random.default_rng(0).random((16, 16, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(np.zeros((8, 8)), np.ones((8, 8))) == 0.0
    assert psnr(np.zeros((8, 8)), np.full((8, 8), 0.5)) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_shape_mismatch():
    with pytest.raises(InvalidInput):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_mask():
    a, b = np.zeros((4, 4)), np.zeros((4, 4))
    b[0, 0] = 1.0
    m = np.zeros((4, 4), bool)
    m[1:, 1:] = True
    assert psnr(a, b, m) == PSNR_CAP
    assert psnr(a, b, ~m) < 20


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_symmetry(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((16, 16, 3)), r.random((16, 16, 3))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_psnr_decreases_with_noise(seed):
    r = np.random.default_rng(seed)
    a = r.random((24, 24, 3)) * 0.5 + 0.25
    base = r.normal(size=a.shape)
    values = [psnr(a, a + s * base) for s in (0.01, 0.05, 0.2)]
    assert values[0] > values[1] > values[2]


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_reference_implementation(seed):
    r = np.random.default_rng(seed)
    a = r.random((32, 40, 3))
    b = np.clip(a + r.normal(scale=0.1, size=a.shape), 0, 1)
    ref = structural_similarity(luminance(a), luminance(b), gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_ssim_identity_and_checkerboard():
    a = np.random.default_rng(1).random((20, 20, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    board = (np.indices((32, 32)).sum(0) % 2).astype(float)
    value = ssim(board, 1 - board)
    ref = structural_similarity(board, 1 - board, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert value < 0.5
    assert value == pytest.approx(ref, abs=1e-6)


def test_ssim_constant_closed_form():
    c1, c2 = 0.2, 0.7
    k1 = 0.01 ** 2
    expected = (2 * c1 * c2 + k1) / (c1 ** 2 + c2 ** 2 + k1)
    assert ssim(np.full((16, 16), c1), np.full((16, 16), c2)) == pytest.approx(expected, rel=1e-9)
    assert -1.0 <= expected <= 1.0
    with pytest.raises(InvalidInput):
        ssim(np.zeros((10, 16)), np.zeros((10, 16)))


def test_table_serialization():
    t = Table("sigma", [Row(0.0, 30.0, 0.9), Row(0.4, 20.5, 0.7)])
    rows = list(csv.reader(io.StringIO(t.to_csv())))
    assert rows[0] == ["sigma", "psnr", "ssim"]
    assert rows[2] == ["0.400000", "20.500000", "0.700000"]
    g = Table("g", [Row(3.0, 18.0, 0.6, 0.01)], with_loss=True)
    assert next(csv.reader(io.StringIO(g.to_csv()))) == ["g", "final_loss", "psnr", "ssim"]
    assert json.loads(g.to_json())["rows"][0] == {"g": 3.0, "final_loss": 0.01, "psnr": 18.0, "ssim": 0.6}


@pytest.fixture(scope="module")
def tiny():
    from gorender.minidiffusion import DiTConfig, MiniDiT
    from gorender.synthdata import generate_sample
    model = MiniDiT(DiTConfig(dim=16, depth=1, heads=2, patch=4, freq_dim=16))
    model.randomize(0, 0.2)
    data = [generate_sample(s, 2, 2, "orbit", resolution=16) for s in range(2)]
    return model, data


def test_sweep_zero_row_equals_plain_evaluation(tiny):
    model, data = tiny
    table = robustness_sweep(model, data, [0.0, 0.3], seed=4, steps=2)
    assert table.rows[0].psnr == evaluate(model, data, steps=2, seed=4)[0]
    assert [r.key for r in table.rows] == [0.0, 0.3]
    again = robustness_sweep(model, data, [0.0, 0.3], seed=4, steps=2)
    assert again.to_csv() == table.to_csv()
    with pytest.raises(InvalidInput):
        robustness_sweep(model, data, [-0.1], steps=1)


def test_foreground_only_changes_psnr(tiny):
    model, data = tiny
    assert evaluate(model, data, steps=1, foreground_only=True) != evaluate(model, data, steps=1)


def test_g_ablation_runs_every_gap(tiny):
    from gorender.minidiffusion import DiTConfig, TrainConfig
    _, data = tiny
    seen = []
    table = g_ablation(data, (0, 1, 3, 5, 10), model_config=DiTConfig(dim=16, depth=1, heads=2, patch=4, freq_dim=16),
                       train_config=TrainConfig(steps=2), eval_steps=1, progress=seen.append)
    assert [r.key for r in table.rows] == [0, 1, 3, 5, 10] == [r.key for r in seen]
    assert all(np.isfinite(r.loss) for r in table.rows)

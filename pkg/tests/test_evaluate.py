import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from miqa import autodiff as ad
from miqa import evaluate as E
from miqa import model as M
from miqa import taskgen as tg

TINY = M.BackboneSpec(conv_layers=((4, 3, 2), (8, 3, 2)), hidden=8, input_size=(32, 32))


def test_plcc_hand_value():
    assert E.plcc([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-12)


def test_srocc_hand_value():
    # d = (0, 1, 1, 0): 1 - 6 * 2 / (4 * 15)
    assert E.srocc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-9)


def test_perfect_and_inverse():
    x = np.arange(10.0)
    assert E.plcc(x, 2 * x + 1) == pytest.approx(1.0)
    assert E.srocc(x, -x ** 3) == pytest.approx(-1.0)


def test_constant_vector_is_undefined():
    with pytest.raises(E.UndefinedCorrelation):
        E.plcc([1, 2, 3], [5, 5, 5])
    with pytest.raises(E.UndefinedCorrelation):
        E.srocc([2, 2, 2], [1, 2, 3])
    assert E.try_metric(E.srocc, [1, 2, 3], [0, 0, 0]) is None


def test_length_checks():
    with pytest.raises(E.EvalError):
        E.plcc([1, 2], [1, 2, 3])
    with pytest.raises(E.EvalError):
        E.srocc([1], [1])


def test_ties_use_fractional_ranks():
    x = [1, 2, 2, 3, 5, 5, 5]
    y = [2, 1, 4, 3, 7, 6, 6]
    assert E.srocc(x, y) == pytest.approx(stats.spearmanr(x, y).statistic, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 40), st.floats(0.1, 10), st.floats(-5, 5))
def test_plcc_affine_invariance(seed, n, a, b):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(n), r.standard_normal(n)
    assert E.plcc(x, a * y + b) == pytest.approx(E.plcc(x, y), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=30, unique=True),
       st.randoms(use_true_random=False))
def test_srocc_monotone_invariance(values, r):
    x = np.array(values, dtype=np.float64)
    r.shuffle(values)
    y = np.array(values, dtype=np.float64)
    assert E.srocc(x, y ** 3 + 7) == pytest.approx(E.srocc(x, y), abs=1e-9)


def test_patch_grid():
    assert E.patch_grid(32, 32) == [0]
    assert E.patch_grid(64, 32) == [0, 32]
    assert E.patch_grid(70, 32) == [0, 32, 38]
    with pytest.raises(E.EvalError):
        E.patch_grid(16, 32)


def test_predict_large_images_averages_patches(rng):
    theta = M.build_model(TINY, seed=0)
    big = rng.uniform(size=(2, 64, 32, 3)).astype(np.float32)
    expected = (M.predict(theta, np.ascontiguousarray(big[:, :32]))
                + M.predict(theta, np.ascontiguousarray(big[:, 32:]))) / 2
    np.testing.assert_allclose(E.predict_images(theta, big), expected, rtol=1e-6)


def _target(seed=0):
    bases = tg.gen_base_images(6, (32, 32), seed=seed)
    return tg.build_target(tg.get_family("gaussian-blur"), bases, 0.5, np.random.default_rng(seed))


def test_fine_tune_preserves_layout_and_reduces_loss():
    theta = M.build_model(TINY, seed=0)
    target = _target()
    tuned, losses = E.fine_tune(theta, target, P=15, alpha_f=1e-3, return_losses=True)
    assert tuned.names() == theta.names()
    assert tuned.num_parameters == theta.num_parameters
    assert len(losses) == 16 and losses[-1] < losses[0]
    assert not tuned.equal(theta)


def test_fine_tune_validation():
    theta = M.build_model(TINY, seed=0)
    with pytest.raises(E.EvalError):
        E.fine_tune(theta, _target(), P=0)
    with pytest.raises(E.EvalError):
        E.fine_tune(theta, _target(), alpha_f=0)
    with pytest.raises(M.IncompatibleParams):
        E.fine_tune(theta, _target(), spec=M.DEFAULT_SPEC)


def test_evaluate_model_report():
    theta = M.build_model(TINY, seed=0)
    report = E.evaluate_model(theta, _target())
    assert report.n == 15 and report.predictions.shape == (15,)
    assert report.srocc is None or -1 <= report.srocc <= 1
    assert report.loss >= 0


def test_evaluate_constant_predictor_is_undefined():
    theta = M.build_model(TINY, seed=0)
    arrays = {k: np.zeros_like(v) for k, v in theta.items()}
    arrays["fc2.bias"] = np.array([0.5], dtype=np.float32)
    report = E.evaluate_model(theta.replace(arrays), _target())
    assert report.undefined and report.plcc is None


def test_saliency_linear_model_is_weight_magnitude(rng):
    w = rng.standard_normal((8, 8, 3))
    theta = M.build_model(TINY, seed=0)

    def linear(params, x):
        return ad.sum_all(ad.mul(x, ad.Tensor(w[None])))

    sal = E.saliency_map(theta, rng.uniform(size=(8, 8, 3)), forward=linear)
    expected = np.abs(w).max(axis=-1)
    np.testing.assert_allclose(sal, expected / expected.max(), rtol=1e-5)


def test_saliency_of_model(tmp_path):
    theta = M.build_model(TINY, seed=0)
    img = tg.gen_base_images(1, seed=0)[0].pixels
    sal = E.saliency_map(theta, img)
    assert sal.shape == (32, 32) and sal.max() == pytest.approx(1.0) and sal.min() >= 0
    path = tmp_path / "s.pgm"
    E.write_pgm(path, sal)
    back = tg.read_pnm(path)
    assert back.shape == (32, 32, 1)
    assert np.abs(back[..., 0] - sal).max() <= 0.5 / 255 + 1e-9

import numpy as np
import pytest

from src.nn import Parameter
from src.processors.gradcheck_processor import (LAYERS, GradcheckProcessor, check_gradients, numerical_gradient,
                                                pool_margin, relative_error)


def test_numerical_gradient_of_a_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    grad = numerical_gradient(lambda: float((x ** 2).sum()), x, 1e-6)
    np.testing.assert_allclose(grad, 2 * x, rtol=1e-6)
    np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])


def test_relative_error_floor():
    assert relative_error([0.0], [1e-5]) == pytest.approx(1e-2)
    assert relative_error([2.0], [1.0]) == pytest.approx(0.5)
    assert relative_error(np.zeros(0), np.zeros(0)) == 0.0


def test_relative_error_is_taken_over_the_whole_tensor():
    assert relative_error([1.0, 1e-6], [1.0, 2e-6]) == pytest.approx(1e-6)
    assert relative_error(np.ones((2, 3)), np.ones((2, 3))) == 0.0


def test_pool_margin():
    assert pool_margin(np.array([[1.0, 3.0, 2.5], [0.0, 0.1, -1.0]])) == pytest.approx(0.1)
    assert pool_margin(np.ones((2, 1))) == float('inf')


def test_check_gradients_on_a_product():
    w = Parameter(np.array([0.3, -1.2]), name='w')
    x = np.array([2.0, 0.5])
    errors = check_gradients(lambda: ((w * x) * (w * x)).sum(), [w], 1e-6)
    assert errors['w'] < 1e-6
    assert not w.grad.any()


def test_rejects_no_instances():
    with pytest.raises(ValueError):
        GradcheckProcessor(instances=0)


def test_full_suite_passes():
    report = GradcheckProcessor(instances=100, seed=0).run()
    assert report.eps == 1e-3
    assert list(report.layers) == list(LAYERS)
    assert all(result.checks == 100 for result in report.layers.values())
    assert report.max_rel_error < 1e-4
    assert report.passed
    assert report.seconds < 60.0


def test_report_text(tmp_path):
    report = GradcheckProcessor(instances=2, seed=3).run()
    lines = report.write(tmp_path / 'gradcheck.tsv').read_text().splitlines()
    assert lines[0] == 'layer\tchecks\tmax_rel_error'
    assert [line.split('\t')[0] for line in lines[1:]] == list(LAYERS) + ['all']
    assert lines[-1].startswith('all\t2\t')

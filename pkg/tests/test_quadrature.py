import numpy as np
import pytest
from scipy import integrate as sp_integrate

from returntime.errors import QuadratureError
from returntime.quadrature import integrate


class TestIntegrate:
    def test_polynomial_is_exact(self):
        # K15 integrates polynomials up to degree 22 exactly on one panel
        value = integrate(lambda x: 3 * x ** 2, 0.0, 2.0, abs_tol=1e-12)
        assert value == pytest.approx(8.0, abs=1e-12)

    def test_exponential_decay(self):
        value = integrate(np.exp, -50.0, 0.0, abs_tol=1e-10)
        assert value == pytest.approx(1.0, abs=1e-9)

    def test_oscillatory_against_scipy(self):
        f = lambda x: np.sin(x) * np.exp(-0.1 * x)
        ref, _ = sp_integrate.quad(lambda x: float(f(np.asarray(x))), 0.0, 60.0, limit=200)
        assert integrate(f, 0.0, 60.0, abs_tol=1e-10) == pytest.approx(ref, abs=1e-8)

    def test_empty_interval(self):
        assert integrate(np.exp, 1.0, 1.0) == 0.0

    def test_panel_budget_exhaustion_raises_with_diagnostics(self):
        spiky = lambda x: 1.0 / np.sqrt(np.abs(x) + 1e-15)
        with pytest.raises(QuadratureError, match="panels"):
            integrate(spiky, 0.0, 1.0, abs_tol=1e-14, max_panels=4)

    def test_non_finite_integrand_rejected(self):
        with pytest.raises(QuadratureError, match="non-finite"):
            with np.errstate(divide="ignore"):
                integrate(lambda x: 1.0 / x, -1.0, 1.0)

import numpy as np
import pytest

import meta_risk_lab as mrl


@pytest.fixture
def small_config():
    """A d=5 configuration exercising every moving part."""
    d = 5
    spectrum = mrl.Spectrum(np.array([1.0, 0.8, 0.5, 0.3, 0.1]))
    return mrl.ProblemConfig(
        d=d,
        T=50,
        n1=8,
        n2=4,
        m=6,
        alpha=0.05,
        beta_tr=0.2,
        beta_te=0.1,
        noise_sigma=0.5,
        data_spectrum=spectrum,
        task_spectrum=mrl.TaskSpectrum(np.full(d, 0.2)),
        theta_star=np.array([0.5, -0.3, 0.2, 0.0, 0.1]),
        omega0=np.zeros(d),
        seed=11,
    )


def make_config(**overrides):
    d = overrides.pop("d", 4)
    spectrum = overrides.pop("data_spectrum", mrl.poly_spectrum(d, 2.0))
    defaults = dict(
        d=d,
        T=40,
        n1=10,
        n2=5,
        m=10,
        alpha=0.05,
        beta_tr=0.1,
        beta_te=0.1,
        noise_sigma=0.5,
        data_spectrum=spectrum,
        task_spectrum=mrl.isotropic_task_spectrum(d, 0.05),
        theta_star=np.zeros(d),
        omega0=np.zeros(d),
        seed=0,
    )
    defaults.update(overrides)
    return mrl.ProblemConfig(**defaults)

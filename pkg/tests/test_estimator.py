import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nudgeforce import NudgingForceRecovery
from nudgeforce.spectral import high_pass, sobolev_norm


def test_params_roundtrip():
    est = NudgingForceRecovery(mu=7.0, n_stages=2, mode="time_independent")
    assert est.get_params()["mu"] == 7.0
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(beta=0.25)
    assert est.beta == 0.25


def test_unfitted():
    with pytest.raises(NotFittedError):
        NudgingForceRecovery().predict()


def test_fit_predict_score(laminar_twin):
    tw = laminar_twin
    est = NudgingForceRecovery(mu=10.0, n_stages=2, mode="time_independent", dt=tw.cfg.dt)
    est.fit(tw.series, tw.force, truth=tw.truth)
    assert len(est.trace_.stages) == 2
    (f,) = est.predict()
    assert high_pass(f, tw.series.N).max_abs() == 0
    score = est.score(tw.series, tw.force)
    assert score == pytest.approx(-est.trace_.stages[-1].model_error_relative, rel=1e-12)
    assert score > -1e-3


def test_asymptotic_predict_over_window(laminar_twin):
    tw = laminar_twin
    est = NudgingForceRecovery(mu=10.0, n_stages=1, dt=tw.cfg.dt).fit(tw.series)
    times = est.trace_.stages[-1].eval_times[:3]
    out = est.predict(times)
    assert len(out) == 3
    assert all(np.isfinite(sobolev_norm(f)) for f in out)

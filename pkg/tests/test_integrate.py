import numpy as np
import pytest

from qdmess.integrate import IntegrationError, IntegratorConfig, TrajectoryRecord, integrate, sample_times


def _run(method, **kw):
    times = sample_times(2.0, 5)
    out = []
    cfg = IntegratorConfig(method=method, **kw)
    integrate(lambda t, y: np.array([-2j * y[0]]), np.array([1.0 + 0j]), times, cfg,
              lambda t, y: out.append(y[0]), dt=0.01)
    return times, np.array(out)


@pytest.mark.parametrize("method", ["rk4", "rk45"])
def test_linear_oscillator(method):
    t, y = _run(method)
    assert np.max(np.abs(y - np.exp(-2j * t))) < 1e-8


def test_rk4_fourth_order():
    errs = []
    for h in (0.1, 0.05):
        t, y = _run("rk4", dt=h)
        errs.append(abs(y[-1] - np.exp(-4j)))
    assert np.log2(errs[0] / errs[1]) == pytest.approx(4, abs=0.3)


def test_nonfinite_state_raises():
    with pytest.raises(IntegrationError), np.errstate(over="ignore", invalid="ignore"):
        integrate(lambda t, y: y * y, np.array([1e200]), [0, 1], IntegratorConfig(), lambda t, y: None, dt=0.5)


def test_unknown_method():
    with pytest.raises(ValueError):
        _run("euler")


def test_step_required():
    with pytest.raises(ValueError):
        integrate(lambda t, y: y, np.ones(1), [0, 1], IntegratorConfig(), lambda t, y: None)


def test_sample_times():
    assert np.array_equal(sample_times(1.0, 3), [0, 0.5, 1.0])
    with pytest.raises(ValueError):
        sample_times(-1.0, 3)


def test_record_csv_roundtrip(tmp_path):
    t = np.linspace(0, 1, 4)
    rec = TrajectoryRecord(t, {"sz": np.cos(t) + 0.1j * t}, {"trace": np.ones(4, complex),
                                                             "herm_residual": np.zeros(4)},
                           meta={"method": "x"})
    p = tmp_path / "r.csv"
    rec.to_csv(p)
    back = TrajectoryRecord.from_csv(p)
    assert np.array_equal(back.t, t)
    assert np.array_equal(back.observables["sz"], rec.observables["sz"])
    assert (tmp_path / "r.csv.json").exists()


def test_ensemble_record_columns(tmp_path):
    t = np.linspace(0, 1, 3)
    rec = TrajectoryRecord(t, {"sz": np.ones(3, complex)}, {}, {"sz": np.full(3, 0.1)}, 50)
    p = tmp_path / "e.csv"
    rec.to_csv(p, sidecar=False)
    assert p.read_text().splitlines()[0] == "t,sz_mean,sz_mean_im,sz_stderr,n_traj"
    back = TrajectoryRecord.from_csv(p)
    assert back.n_traj == 50 and np.allclose(back.stderr["sz"], 0.1)

import numpy as np
import pytest

import naive_kalman as ref
from sortbench.boxes import BBox, InvalidBoxError, InvalidStateError, bbox_to_z, x_to_bbox
from sortbench.kalman import (
    P0_DIAG,
    FilterDivergence,
    KalmanModel,
    KalmanState,
    predict,
    update,
)

CV = KalmanModel.constant_velocity()


def test_bbox_to_z_examples():
    np.testing.assert_array_equal(bbox_to_z(BBox(0, 0, 2, 2)), [1, 1, 4, 1])
    np.testing.assert_array_equal(bbox_to_z(BBox(10, 20, 30, 60)), [20, 40, 800, 0.5])
    with pytest.raises(InvalidBoxError):
        bbox_to_z(BBox(5, 5, 5, 9))


def test_x_to_bbox_examples():
    assert x_to_bbox([1, 1, 4, 1, 0, 0, 0])[:4] == (0, 0, 2, 2)
    np.testing.assert_allclose(x_to_bbox([20, 40, 800, 0.5, 0, 0, 0])[:4], [10, 20, 30, 60], atol=1e-12)
    with pytest.raises(InvalidStateError):
        x_to_bbox([0, 0, -1, 1, 0, 0, 0])


def test_box_round_trips(rng):
    for _ in range(1000):
        x1, y1 = rng.uniform(-500, 500, size=2)
        w, h = rng.uniform(1, 300, size=2)
        b = BBox(x1, y1, x1 + w, y1 + h)
        np.testing.assert_allclose(x_to_bbox(bbox_to_z(b))[:4], b[:4], atol=1e-9)
        z = bbox_to_z(b)
        np.testing.assert_allclose(bbox_to_z(x_to_bbox(np.r_[z, 0, 0, 0])), z, rtol=1e-12, atol=1e-9)


def test_model_invariants():
    F = np.eye(7)
    F[0, 4] = F[1, 5] = F[2, 6] = 1
    np.testing.assert_array_equal(CV.F, F)
    np.testing.assert_array_equal(CV.H, np.hstack([np.eye(4), np.zeros((4, 3))]))
    assert not CV.F.flags.writeable
    with pytest.raises(ValueError):
        KalmanModel.constant_velocity(q_diag=(1, 1, 1, 1, 1, 1, -1))
    with pytest.raises(ValueError):
        KalmanModel(np.eye(6), CV.H, CV.Q, CV.R)


def test_predict_examples():
    st = KalmanState(np.array([0, 0, 1, 1, 0, 0, 0.0]), np.diag(P0_DIAG))
    m0 = KalmanModel(CV.F, CV.H, np.zeros((7, 7)), CV.R)
    out = predict(st, m0)
    np.testing.assert_array_equal(out.x, st.x)
    np.testing.assert_allclose(out.P, CV.F @ st.P @ CV.F.T, atol=1e-9)

    out = predict(KalmanState(np.array([0, 0, 1, 1, 2, 3, 0.0]), np.eye(7)), CV)
    np.testing.assert_array_equal(out.x, [2, 3, 1, 1, 2, 3, 0])
    mI = KalmanModel(CV.F, CV.H, np.eye(7), CV.R)
    out = predict(KalmanState(np.zeros(7) + [0, 0, 1, 1, 0, 0, 0], np.eye(7)), mI)
    np.testing.assert_allclose(out.P, CV.F @ CV.F.T + np.eye(7), atol=1e-12)


def test_predict_does_not_mutate_input():
    st = KalmanState(np.array([0, 0, 1, 1, 2, 3, 0.0]), np.eye(7))
    predict(st, CV)
    np.testing.assert_array_equal(st.x, [0, 0, 1, 1, 2, 3, 0])


def test_negative_area_guard():
    out = predict(KalmanState(np.array([0, 0, 1, 1, 0, 0, -5.0]), np.eye(7)), CV)
    assert out.x[2] == 1.0 and out.x[6] == 0.0


def test_control_term():
    B = np.zeros((7, 4))
    B[:4, :4] = np.eye(4)
    m = KalmanModel.constant_velocity(B=B, u=np.array([1.0, -1.0, 0, 0]))
    out = predict(KalmanState(np.array([0, 0, 1, 1, 0, 0, 0.0]), np.eye(7)), m)
    np.testing.assert_array_equal(out.x, [1, -1, 1, 1, 0, 0, 0])
    with pytest.raises(ValueError):
        KalmanModel.constant_velocity(B=B)


def test_update_examples():
    st = KalmanState(np.array([5, 6, 50, 0.5, 1, 1, 0.0]), np.diag(P0_DIAG))
    out = update(st, CV, st.x[:4])
    np.testing.assert_allclose(out.x, st.x, atol=1e-10)
    assert (np.diag(out.P) <= np.diag(st.P) + 1e-12).all()

    big_r = KalmanModel(CV.F, CV.H, CV.Q, 1e12 * np.eye(4))
    out = update(st, big_r, st.x[:4] + 10)
    np.testing.assert_allclose(out.x, st.x, atol=1e-6)


def test_scalar_analogue():
    # one observed coordinate with P=1, R=1: gain 1/2, estimate is the midpoint
    P = np.eye(7)
    R = np.diag([1.0, 1e300, 1e300, 1e300])
    m = KalmanModel(CV.F, CV.H, CV.Q, R)
    st = KalmanState(np.array([2.0, 0, 1, 1, 0, 0, 0]), P)
    out = update(st, m, [6.0, 0, 1, 1])
    assert out.x[0] == pytest.approx(4.0, abs=1e-12)
    assert out.P[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_update_divergence():
    bad = np.eye(7)
    bad[0, 0] = -100.0
    with pytest.raises(FilterDivergence):
        update(KalmanState(np.zeros(7), bad), CV, [0, 0, 0, 0])
    with pytest.raises(ValueError):
        update(KalmanState(np.zeros(7), np.eye(7)), CV, [0, 0, 0])


def test_matches_naive_reference(rng):
    F, H, Q, R = (m.tolist() for m in (CV.F, CV.H, CV.Q, CV.R))
    st = None
    worst = 0.0
    for k in range(1000):
        if k % 25 == 0:
            z0 = [rng.uniform(0, 1000), rng.uniform(0, 600), rng.uniform(200, 20000), rng.uniform(0.3, 3)]
            st = KalmanState.from_observation(z0)
            rx, rP = st.x.tolist(), st.P.tolist()
        st = predict(st, CV)
        rx, rP = ref.predict(rx, rP, F, Q)
        z = st.x[:4] + rng.normal(scale=[3, 3, 50, 0.05])
        z[2], z[3] = max(z[2], 1.0), max(z[3], 0.05)
        st = update(st, CV, z)
        rx, rP = ref.update(rx, rP, H, R, z.tolist())
        worst = max(worst, np.abs(st.x - rx).max(), np.abs(st.P - rP).max())
        assert np.abs(st.P - st.P.T).max() < 1e-9
        assert np.diag(st.P).min() >= -1e-12
    assert worst < 1e-10

import numpy as np
import pytest
from pydantic import ValidationError

from wrfgs.exceptions import SceneError
from wrfgs.oracle import (
    ArrayGeometry,
    MultipathScene,
    arrival_angles,
    beamform_spectrum,
    bin_angles,
    default_subcarriers,
    element_signals,
    ground_truth_csi,
    ground_truth_rssi,
    ground_truth_spectrum,
    rssi_from_gains,
    simulate_paths,
    steering_phase,
)

GEOM = ArrayGeometry()
FREE_SPACE = MultipathScene(max_reflection_order=0)


def _steering_phases(geom, azimuth, elevation):
    return np.array(
        [
            [steering_phase(geom, m, n, azimuth, elevation) for n in range(geom.k_side)]
            for m in range(geom.k_side)
        ]
    )


def test_reference_element_has_zero_phase():
    assert steering_phase(GEOM, 0, 0, 1.3, 0.4) == 0.0


def test_steering_phase_vanishes_towards_zenith():
    phases = _steering_phases(GEOM, 2.0, np.pi / 2)
    np.testing.assert_allclose(np.exp(1j * phases), 1.0, atol=1e-12)


def test_half_wavelength_steering_example():
    assert steering_phase(GEOM, 1, 0, 0.0, 0.0) == pytest.approx(np.pi)


def test_uniform_phases_peak_at_zenith_row():
    spectrum = beamform_spectrum(GEOM, np.zeros((4, 4)), 90, 360)
    assert spectrum.values.max() <= 1.0
    # 仰角最高的一行最接近天顶
    assert spectrum.values[89].min() > 0.99


def test_beamform_rejects_bad_phases():
    with pytest.raises(ValueError, match="4x4"):
        beamform_spectrum(GEOM, np.zeros((3, 3)))
    with pytest.raises(ValueError, match="finite"):
        beamform_spectrum(GEOM, np.full((4, 4), np.nan))


def test_single_plane_wave_argmax():
    rng = np.random.default_rng(0)
    elevation, azimuth = bin_angles(90, 360)
    for _ in range(100):
        row, col = int(rng.integers(1, 90)), int(rng.integers(0, 360))
        phases = _steering_phases(GEOM, azimuth[col], elevation[row])
        spectrum = beamform_spectrum(GEOM, phases, 90, 360)
        assert spectrum.argmax() == (row, col)
        assert 0.999 <= spectrum.values[row, col] <= 1.0
        assert np.all(spectrum.values <= 1.0)


def test_direct_path_only():
    tx = np.array([4.0, 2.0, 1.0])
    (path,) = simulate_paths(FREE_SPACE, tx)
    assert path.order == 0
    assert path.distance == pytest.approx(1.0)
    assert abs(path.gain) == pytest.approx(0.327 / (4 * np.pi))


def test_first_order_box_has_one_path_per_wall():
    paths = simulate_paths(MultipathScene(max_reflection_order=1), np.array([4.0, 2.5, 1.5]))
    assert len(paths) == 7
    assert sorted(p.order for p in paths) == [0] + [1] * 6
    distances = [p.distance for p in paths]
    assert distances == sorted(distances)
    assert paths[0].order == 0


def test_second_order_path_count():
    paths = simulate_paths(MultipathScene(max_reflection_order=2), np.array([4.0, 2.5, 1.5]))
    assert len(paths) == 25


def test_gain_law_for_doubled_distance():
    near = simulate_paths(FREE_SPACE, np.array([4.0, 2.0, 1.0]))[0]
    far = simulate_paths(FREE_SPACE, np.array([5.0, 2.0, 1.0]))[0]
    assert abs(far.gain) == pytest.approx(abs(near.gain) / 2)
    rotation = np.angle(far.gain / near.gain)
    expected = np.angle(np.exp(-2j * np.pi * 1.0 / 0.327))
    assert rotation == pytest.approx(expected, abs=1e-9)


def test_reflection_multiplies_coefficient():
    scene = MultipathScene(max_reflection_order=1, reflection_coeff=((0.0, 0.5),))
    for path in simulate_paths(scene, np.array([4.0, 2.5, 1.5])):
        assert path.reflection == pytest.approx(0.5j if path.order else 1.0)


@pytest.mark.parametrize(
    "tx", [(7.0, 2.0, 1.0), (3.0, 2.0, -0.1), (3.0, 2.0, 1.0), (np.nan, 1.0, 1.0)]
)
def test_invalid_transmitter(tx):
    with pytest.raises(SceneError):
        simulate_paths(FREE_SPACE, np.array(tx))


def test_scene_validation():
    with pytest.raises(ValidationError):
        MultipathScene(reflection_coeff=((1.5, 0.0),))
    with pytest.raises(ValidationError):
        MultipathScene(rx_position=(7.0, 2.0, 1.0))
    with pytest.raises(ValidationError):
        MultipathScene(max_reflection_order=4)
    with pytest.raises(ValidationError):
        ArrayGeometry(spacing=0.5)


def test_rssi_examples():
    assert rssi_from_gains([1.0 + 0.0j]) == pytest.approx(0.0)
    assert rssi_from_gains([1.0, -1.0]) == -100.0


def test_rssi_inverse_distance_law():
    near = ground_truth_rssi(FREE_SPACE, np.array([4.0, 2.0, 1.0]))
    far = ground_truth_rssi(FREE_SPACE, np.array([5.0, 2.0, 1.0]))
    assert far - near == pytest.approx(-20 * np.log10(2), abs=1e-9)


def test_far_field_direct_path_matches_plane_wave():
    tx = np.array([4.5, 3.1, 2.2])
    azimuth, elevation = arrival_angles(FREE_SPACE, tx)
    truth = ground_truth_spectrum(FREE_SPACE, GEOM, tx, h=45, w=180, far_field=True)
    plane = beamform_spectrum(GEOM, _steering_phases(GEOM, azimuth, elevation), 45, 180)
    np.testing.assert_allclose(truth.values, plane.values, atol=1e-9)


def test_weak_reflections_keep_peak_near_direct_path():
    scene = MultipathScene(max_reflection_order=1, reflection_coeff=((0.1, 0.0),))
    tx = np.array([5.0, 3.0, 2.2])
    azimuth, elevation = arrival_angles(scene, tx)
    row, col = ground_truth_spectrum(scene, GEOM, tx).argmax()
    col_error = abs((col - np.rad2deg(azimuth) + 180) % 360 - 180)
    assert col_error <= 5
    assert abs(row - np.rad2deg(elevation)) <= 5


def test_arrival_azimuth_is_offset_by_half_turn():
    azimuth, elevation = arrival_angles(FREE_SPACE, np.array([4.0, 2.0, 1.0]))
    assert azimuth == pytest.approx(np.pi)
    assert elevation == pytest.approx(0.0)


def test_default_subcarriers_are_ascending():
    freqs = default_subcarriers()
    assert freqs.shape == (52,)
    assert np.all(np.diff(freqs) > 0)
    assert freqs.mean() == pytest.approx(2.4e9)


def test_single_path_csi():
    tx = np.array([4.0, 3.0, 2.0])
    csi = ground_truth_csi(FREE_SPACE, tx)
    assert csi.shape == (52,)
    assert np.all(np.diff(np.abs(csi)) < 0)
    d = simulate_paths(FREE_SPACE, tx)[0].distance
    slope = np.diff(np.unwrap(np.angle(csi))) / np.diff(default_subcarriers())
    np.testing.assert_allclose(slope, -2 * np.pi * d / 299_792_458.0, rtol=1e-6)


def test_absorbing_walls_match_free_space():
    tx = np.array([4.0, 3.0, 2.0])
    absorbing = MultipathScene(max_reflection_order=2, reflection_coeff=((0.0, 0.0),))
    np.testing.assert_allclose(ground_truth_csi(absorbing, tx), ground_truth_csi(FREE_SPACE, tx))
    assert ground_truth_rssi(absorbing, tx) == pytest.approx(ground_truth_rssi(FREE_SPACE, tx))


def test_csi_rejects_unordered_subcarriers():
    with pytest.raises(ValueError, match="ascending"):
        ground_truth_csi(FREE_SPACE, np.array([4.0, 3.0, 2.0]), np.array([2.0e9, 1.0e9]))


@pytest.mark.parametrize("order", [1, 2])
def test_negated_walls_flip_reflected_gains(order):
    tx = np.array([4.2, 2.7, 1.9])
    scene = MultipathScene(max_reflection_order=order, reflection_coeff=((-0.4, 0.2),))
    negated = MultipathScene(max_reflection_order=order, reflection_coeff=((0.4, -0.2),))
    paths = simulate_paths(scene, tx)
    flipped = simulate_paths(negated, tx)
    assert [p.order for p in paths] == [p.order for p in flipped]
    for path, other in zip(paths, flipped, strict=True):
        assert other.distance == path.distance
        assert other.gain == pytest.approx((-1) ** path.order * path.gain, rel=1e-12)
    # 一阶场景中每条反射路径都恰好变号
    if order == 1:
        assert flipped[0].gain == paths[0].gain
        assert all(o.gain == pytest.approx(-p.gain) for p, o in zip(paths[1:], flipped[1:]))


def test_spectrum_ignores_global_phase():
    scene = MultipathScene()
    tx = np.array([4.6, 1.2, 2.1])
    signals = element_signals(scene, GEOM, tx)
    base = beamform_spectrum(GEOM, np.angle(signals), 45, 180)
    truth = ground_truth_spectrum(scene, GEOM, tx, h=45, w=180)
    np.testing.assert_allclose(truth.values, base.values)
    for phase in (0.7, -2.9, np.pi):
        rotated = beamform_spectrum(GEOM, np.angle(signals * np.exp(1j * phase)), 45, 180)
        np.testing.assert_allclose(rotated.values, base.values, atol=1e-12)


def test_mirror_symmetric_room_gives_symmetric_spectrum():
    # 阵列中心线 y = rx_y + 1.5·D 与房间中线重合，发射机在这条线上
    center = 2.0
    scene = MultipathScene(rx_position=(3.0, center - 1.5 * GEOM.spacing, 1.0))
    tx = np.array([4.5, center, 1.0])
    values = ground_truth_spectrum(scene, GEOM, tx).values
    mirrored = values[:, (-np.arange(values.shape[1])) % values.shape[1]]
    np.testing.assert_allclose(values, mirrored, atol=1e-6)

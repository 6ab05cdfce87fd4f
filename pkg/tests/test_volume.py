import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from cryosagd.volume import (
    CtfParams,
    DensityVolume,
    ParticleImage,
    Pose,
    disk_mask,
    fft2,
    fft3,
    frequency_grid,
    ifft2,
    ifft3,
    nyquist,
    pose_to_rotation,
    rotation_to_pose,
)


def brute_dft(x):
    """Centered unitary DFT by direct summation over every index pair."""
    n = x.shape[0]
    k = np.arange(n) - n // 2
    E = np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)
    out = x.astype(complex)
    for axis in range(x.ndim):
        out = np.moveaxis(np.tensordot(E, np.moveaxis(out, axis, 0), axes=(1, 0)), 0, axis)
    return out


def test_brute_dft_matches_fft3_on_8cube():
    x = np.random.default_rng(0).normal(size=(8, 8, 8))
    got = fft3(DensityVolume(x)).data
    assert np.max(np.abs(got - brute_dft(x))) < 1e-9


def test_brute_dft_matches_fft2_on_8x8():
    x = np.random.default_rng(1).normal(size=(8, 8))
    got = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x), norm="ortho"))
    assert np.max(np.abs(got - brute_dft(x))) < 1e-9
    # fft2 at Nyquist keeps everything except the unpaired row/column
    f = fft2(ParticleImage(x)).data
    mask = disk_mask(8, 1.0, 0.5)
    assert np.max(np.abs(f[mask] - brute_dft(x)[mask])) < 1e-9


def test_constant_volume_has_dc_only():
    f = fft3(DensityVolume(np.full((16,) * 3, 2.5))).data
    dc = f[8, 8, 8]
    assert dc == pytest.approx(2.5 * 16 ** 1.5)
    f[8, 8, 8] = 0
    assert np.max(np.abs(f)) < 1e-10


def test_center_delta_has_flat_spectrum():
    x = np.zeros((8, 8, 8))
    x[4, 4, 4] = 1.0
    f = fft3(DensityVolume(x)).data
    np.testing.assert_allclose(f, 8 ** -1.5, atol=1e-14)


def test_fft3_round_trip_16():
    x = np.random.default_rng(2).normal(size=(16, 16, 16))
    back = ifft3(fft3(DensityVolume(x, 3.0)))
    assert np.max(np.abs(back.data - x)) < 1e-10
    assert back.voxel_size == 3.0


def test_padded_transform_round_trip():
    x = np.random.default_rng(3).normal(size=(8, 8, 8))
    fv = fft3(DensityVolume(x), pad=2)
    assert fv.data.shape == (16, 16, 16)
    assert fv.oversampling == 2
    np.testing.assert_allclose(ifft3(fv).data, x, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([8, 10, 12]))
def test_parseval_and_hermitian(seed, n):
    x = np.random.default_rng(seed).normal(size=(n, n, n))
    f = fft3(DensityVolume(x)).data
    assert np.sum(np.abs(f) ** 2) == pytest.approx(np.sum(x ** 2), rel=1e-9)
    # F(-k) = conj F(k); on the centered grid -k maps index i to (n - i) % n
    flip = f[np.ix_(*[(-np.arange(n)) % n] * 3)]
    assert np.max(np.abs(f - np.conj(flip))) < 1e-9 * np.abs(f).max()


def test_fft2_constant_image_dc_only():
    img = ParticleImage(np.ones((16, 16)), 2.0)
    f = fft2(img).data
    assert abs(f[8, 8]) == pytest.approx(16.0)
    f[8, 8] = 0
    assert np.max(np.abs(f)) < 1e-12


def test_half_nyquist_coefficient_count():
    n, px = 32, 2.0
    rho = 0.5 * nyquist(px)
    count = disk_mask(n, px, rho).sum()
    # enumerate lattice points inside the disk directly
    k = np.arange(-n // 2 + 1, n // 2)
    r = rho * n * px
    expected = sum(1 for a in k for b in k if a * a + b * b <= r * r)
    assert count == expected
    assert abs(count - np.pi * r ** 2) / (np.pi * r ** 2) < 0.05


def test_impulse_image_truncated_flat_spectrum():
    x = np.zeros((16, 16))
    x[8, 8] = 1.0
    f = fft2(ParticleImage(x), rho=0.05).data
    mask = disk_mask(16, 1.0, 0.05)
    np.testing.assert_allclose(f[mask], 1 / 16, atol=1e-14)
    assert np.all(f[~mask] == 0)


def test_fft2_rejects_rho_above_nyquist():
    with pytest.raises(ValueError):
        fft2(ParticleImage(np.zeros((8, 8)), 1.0), rho=0.6)


def test_ifft2_inverts_full_band_up_to_nyquist_row():
    x = np.random.default_rng(4).normal(size=(16, 16))
    f = fft2(ParticleImage(x))
    back = ifft2(f)
    # only the dropped Nyquist row/column differs
    full = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x), norm="ortho"))
    full[~disk_mask(16, 1.0, 0.5)] = 0
    np.testing.assert_allclose(back, np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(full),
                                                                  norm="ortho")).real)


def test_frequency_grid_units():
    fx, fy = frequency_grid(8, 2.0)
    assert fx[0, 0] == pytest.approx(-4 / 16)
    assert fx[4, 0] == 0
    assert fy[0, 5] == pytest.approx(1 / 16)


def test_pose_identity_and_pi_rotation():
    assert np.allclose(pose_to_rotation(Pose([0, 0, 1.0], 0.0)), np.eye(3))
    R = pose_to_rotation(Pose([0, 0, 1.0], np.pi))
    np.testing.assert_allclose(R, np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_south_pole_direction():
    R = pose_to_rotation(Pose([0, 0, -1.0], 0.3))
    np.testing.assert_allclose(R[:, 2], [0, 0, -1], atol=1e-15)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-14)


unit_vectors = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: 0.1 < np.linalg.norm(v))


@settings(max_examples=100, deadline=None)
@given(unit_vectors, st.floats(-10, 10))
@example((0.0, 1e-156, -1.0), 0.0)
def test_random_pose_is_proper_rotation(v, angle):
    d = np.asarray(v) / np.linalg.norm(v)
    R = pose_to_rotation(Pose(d, angle))
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(R[:, 2], d, atol=1e-12)
    back = pose_to_rotation(rotation_to_pose(R))
    np.testing.assert_allclose(back, R, atol=1e-9)


def test_pose_validation():
    with pytest.raises(ValueError):
        Pose([1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        Pose([1.0, 0.0])


@pytest.mark.parametrize("shape", [(7, 7, 7), (8, 8, 6), (6, 6, 6), (8, 8)])
def test_volume_shape_validation(shape):
    with pytest.raises(ValueError):
        DensityVolume(np.zeros(shape))


@pytest.mark.parametrize("kwargs", [dict(defocus=0.0), dict(defocus=-5.0), dict(voltage=0.0),
                                    dict(amplitude_contrast=1.5), dict(envelope_b_factor=-1.0)])
def test_ctf_params_validation(kwargs):
    with pytest.raises(ValueError):
        CtfParams(**kwargs)


def test_identity_ctf_skips_defocus_check():
    assert CtfParams(defocus=0.0, identity=True).identity

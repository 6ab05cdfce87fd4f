import numpy as np
import pytest

from cryosagd.reconstruct import (
    ReconConfig,
    Reconstructor,
    estimate_mass,
    initial_volume,
    run_reconstruction,
)
from cryosagd.sagd import L_DECAY
from cryosagd.simulate import SimConfig, phantom_geometric, simulate_dataset
from cryosagd.volume import DensityVolume, nyquist

N, VS = 16, 8.0
NY = nyquist(VS)


@pytest.fixture(scope="module")
def data():
    truth = phantom_geometric(N, VS, "lobes", seed=1)
    ds, _ = simulate_dataset(truth, SimConfig(K=60, snr=0.2, seed=1))
    return truth, ds


def small_config(**kw):
    base = dict(batch_size=20, n_heldout=10, eval_every=5, rho_min=0.25 * NY,
                rho_max=0.5 * NY, prior="exponential", prior_lambda=1.0, seed=3)
    base.update(kw)
    return ReconConfig(**base)


def test_zero_iterations_returns_initialization(data):
    _, ds = data
    init = DensityVolume(np.random.default_rng(0).random((N, N, N)), VS)
    vol, rows = run_reconstruction(ds, small_config(), init, max_iter=0)
    np.testing.assert_array_equal(vol.data, init.data)
    assert rows == []


def test_mass_estimate_and_initializer(data):
    truth, ds = data
    mass = estimate_mass(ds.images, ds.ctfs, VS)
    assert mass == pytest.approx(truth.data.sum(), rel=0.05)
    v = initial_volume(N, VS, mass, count=10, seed=2)
    assert v.data.sum() == pytest.approx(mass)
    assert v.data.min() >= 0


def test_runs_are_deterministic(data):
    _, ds = data
    a = Reconstructor(ds, small_config())
    b = Reconstructor(ds, small_config())
    a.run(8)
    b.run(8)
    np.testing.assert_equal(a.rows, b.rows)
    np.testing.assert_array_equal(a.state.v, b.state.v)


def test_checkpoint_restart_is_bit_exact(data, tmp_path):
    _, ds = data
    ref = Reconstructor(ds, small_config())
    ref.run(12)
    first = Reconstructor(ds, small_config())
    first.run(5)
    first.save(tmp_path / "ck.cfrg")
    resumed = Reconstructor(ds, small_config())
    resumed.restore(tmp_path / "ck.cfrg")
    resumed.run(12)
    np.testing.assert_equal(resumed.rows, ref.rows)
    np.testing.assert_array_equal(resumed.state.v, ref.state.v)


def test_iterates_stay_non_negative(data):
    _, ds = data
    seen = []
    rec = Reconstructor(ds, small_config(), callback=lambda r, row: seen.append(r.state.v.min()))
    rec.run(6)
    assert min(seen) >= 0


def test_lipschitz_decays_between_searches(data):
    _, ds = data
    rec = Reconstructor(ds, small_config(line_search_every=1000))
    rows = [rec.step() for _ in range(4)]
    assert [r["line_search"] for r in rows] == [1, 0, 0, 0]
    for prev, cur in zip(rows[1:], rows[2:]):
        assert cur["L"] == pytest.approx(prev["L"] * L_DECAY, rel=1e-15)


def test_line_search_every_twenty(data):
    _, ds = data
    rec = Reconstructor(ds, small_config(rho_max=0.25 * NY, plateau_window=10 ** 6))
    rows = [rec.step() for _ in range(41)]
    assert [r["iteration"] for r in rows if r["line_search"]] == [0, 20, 40]


def test_never_plateauing_keeps_rho_min(data):
    _, ds = data
    rec = Reconstructor(ds, small_config(plateau_tol=-np.inf))
    rec.run(30)
    assert {r["rho"] for r in rec.rows} == {0.25 * NY}
    assert rec.scheme.generation == 0


def test_plateau_upgrades_band_and_generation(data):
    _, ds = data
    # a tolerance no change can meet makes every window a plateau
    rec = Reconstructor(ds, small_config(plateau_tol=np.inf, plateau_window=5))
    rec.run(25)
    rhos = [r["rho"] for r in rec.rows]
    assert rhos[0] == 0.25 * NY and rhos[-1] == 0.5 * NY
    assert all(a <= b for a, b in zip(rhos, rhos[1:]))
    assert rec.scheme.generation == 1
    changed = next(i for i, r in enumerate(rec.rows) if r["generation"] == 1)
    assert rec.rows[changed]["line_search"] == 1
    # at the top band a further plateau stops the run
    assert rec.done


def test_default_band_endpoints(data):
    _, ds = data
    rec = Reconstructor(ds, ReconConfig(prior_lambda=1.0))
    assert rec.rho_min == pytest.approx(0.14 * NY)
    assert rec.rho_max == pytest.approx(0.56 * NY)


def test_published_band_limits_as_nyquist_fractions():
    ny = nyquist(2.8)
    assert (1 / 40) / ny == pytest.approx(0.14)
    assert (1 / 10) / ny == pytest.approx(0.56)


def test_heldout_images_never_enter_batches(data):
    _, ds = data
    rec = Reconstructor(ds, small_config())
    batched = np.concatenate(rec.batches)
    assert len(rec.heldout) == 10
    assert not set(batched) & set(rec.heldout)
    assert len(batched) + len(rec.heldout) == ds.K


def test_noise_free_objective_decreases():
    truth = phantom_geometric(8, 8.0, "lobes", seed=2)
    ds, _ = simulate_dataset(truth, SimConfig(K=12, snr=np.inf, seed=2))
    ny = nyquist(8.0)
    cfg = ReconConfig(batch_size=100, n_heldout=0, rho_min=0.5 * ny, rho_max=0.5 * ny,
                      s0=1e12, prior="uniform", noise_sigma=0.05 * ds.images.std(), seed=1)
    rec = Reconstructor(ds, cfg)
    rows = [rec.step() for _ in range(80)]
    assert all(r["fraction_evaluated"] == 1.0 for r in rows)
    obj = [r["objective"] for r in rows]
    # The opening search certifies steps of 1/L but eps = 2 doubles them, so the
    # first window can oscillate. The periodic search at iteration 20 doubles L
    # and from then on every step lowers the objective.
    assert rows[20]["line_search"] == 1
    assert all(b <= a * (1 + 1e-12) for a, b in zip(obj[20:], obj[21:]))
    assert obj[-1] < 0.5 * obj[0]

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from hypothesis import given, settings
from hypothesis import strategies as st

from nlox.datagen import (
    InputSignalSpec,
    Normalizer,
    build_dataset,
    directory_digest,
    generate_input_sequence,
    load_dataset,
    sample_initial_state,
    save_dataset,
    simulate_trajectory,
    split_indices,
)
from nlox.errors import ModelFileError
from nlox.plants import PlantModel

LOGNORMAL = InputSignalSpec("lognormal_per_step", (0.4,), (0.2,), convention="moments")
HELD = InputSignalSpec("gaussian_held", (6.0, 100.0), (1.0, 15.0), hold_intervals=50)


def still_plant():
    return PlantModel(
        name="still", n_x=2, n_u=1, n_y=1, rhs=lambda x, u: np.zeros_like(x), h=lambda x: x[..., :1],
        state_domain=np.array([[-10.0, 10.0]] * 2), sample_initial_state=lambda rng: rng.uniform(0, 1, 2),
        nominal_input=np.zeros(1), state_names=("a", "b"), input_names=("u",), output_names=("y",),
    )


class TestInitialStates:
    def test_bioreactor_box(self, bioreactor, rng):
        draws = np.stack([sample_initial_state(bioreactor, rng) for _ in range(10_000)])
        assert np.all((draws >= 0.05) & (draws <= 0.1))
        np.testing.assert_allclose(draws.mean(axis=0), 0.075, atol=0.002)

    def test_williams_otto_feed_composition(self, williams_otto, rng):
        for _ in range(50):
            x = sample_initial_state(williams_otto, rng)
            assert x[0] + x[1] == 1.0
            np.testing.assert_array_equal(x[2:], 0.0)


class TestInputSequences:
    def test_hold_whole_horizon_is_constant(self, rng):
        spec = InputSignalSpec("gaussian_held", (1.0,), (2.0,), hold_intervals=40)
        u = generate_input_sequence(spec, 40, rng)
        assert np.all(u == u[0])

    def test_lognormal_is_positive(self, rng):
        assert np.all(generate_input_sequence(LOGNORMAL, 5000, rng) > 0)
        underlying = InputSignalSpec("lognormal_per_step", (0.4,), (0.2,))
        assert np.all(generate_input_sequence(underlying, 5000, rng) > 0)

    def test_staircase_changes_only_on_hold_boundaries(self, rng):
        u = generate_input_sequence(HELD, 500, rng)
        for k in range(499):
            if (k + 1) % 50:
                np.testing.assert_array_equal(u[k], u[k + 1])
            else:
                assert np.all(u[k] != u[k + 1])

    def test_moments_convention_matches_mean_and_std(self, rng):
        u = generate_input_sequence(LOGNORMAL, 200_000, rng)
        assert u.mean() == pytest.approx(0.4, abs=0.003)
        assert u.std() == pytest.approx(0.2, abs=0.005)

    def test_underlying_convention_median(self, rng):
        spec = InputSignalSpec("lognormal_per_step", (0.4,), (0.2,))
        u = generate_input_sequence(spec, 100_001, rng)
        assert np.median(u) == pytest.approx(np.exp(0.4), rel=0.01)

    def test_clip_bound(self, rng):
        low, high = HELD.bounds()
        u = generate_input_sequence(HELD, 100_000, rng)
        assert np.all(u >= low) and np.all(u <= high)

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            InputSignalSpec("uniform", (0.0,), (1.0,))


class TestSimulation:
    def test_still_plant_is_constant(self, rng):
        traj = simulate_trajectory(still_plant(), np.array([0.3, 0.4]), np.ones((20, 1)), 0.1)
        np.testing.assert_array_equal(traj.states, np.tile([0.3, 0.4], (20, 1)))

    def test_bioreactor_drift_equilibrium(self, bioreactor):
        traj = simulate_trajectory(bioreactor, np.array([0.1, 0.0]), np.zeros((50, 1)), 0.1)
        np.testing.assert_array_equal(traj.states, np.tile([0.1, 0.0], (50, 1)))

    def test_substep_refinement(self, bioreactor, rng):
        u = generate_input_sequence(LOGNORMAL, 200, rng)
        x0 = np.array([0.07, 0.06])
        fine = simulate_trajectory(bioreactor, x0, u, 0.1, substeps=20).states[-1]
        coarse = simulate_trajectory(bioreactor, x0, u, 0.1, substeps=10).states[-1]
        assert np.max(np.abs(fine - coarse)) < 1e-9

    def test_hot_reactor_matches_stiff_solver(self, williams_otto):
        # at 146 C the third reaction is fast enough to destabilise 20 fixed RK4 substeps
        u = np.tile([6.05, 146.35], (20, 1))
        x0 = np.array([0.3, 0.7, 0.0, 0.0, 0.0, 0.0])
        traj = simulate_trajectory(williams_otto, x0, u, 0.1, substeps=20)
        ref = solve_ivp(lambda t, x: williams_otto.rhs(x, u[0]), (0.0, 2.0), x0, method="Radau",
                        t_eval=0.1 * np.arange(20), rtol=1e-11, atol=1e-13)
        np.testing.assert_allclose(traj.states, ref.y.T, atol=1e-6)

    def test_outputs_are_h_of_states(self, bioreactor, rng):
        traj = simulate_trajectory(bioreactor, np.array([0.07, 0.06]), generate_input_sequence(LOGNORMAL, 30, rng), 0.1)
        np.testing.assert_array_equal(traj.outputs, traj.states[:, :1])

    def test_batch_matches_single(self, bioreactor, rng):
        x0 = rng.uniform(0.05, 0.1, size=(3, 2))
        U = np.stack([generate_input_sequence(LOGNORMAL, 40, rng) for _ in range(3)])
        states, _ = simulate_trajectory(bioreactor, x0, U, 0.1)
        for i in range(3):
            np.testing.assert_allclose(simulate_trajectory(bioreactor, x0[i], U[i], 0.1).states, states[i],
                                       rtol=1e-15, atol=1e-18)


@pytest.fixture(scope="module")
def small_dataset(bioreactor):
    return build_dataset(bioreactor, 10, 60, LOGNORMAL, seed=5, t_s=0.1)


class TestDataset:
    def test_split_sizes(self, small_dataset):
        train, test, _ = small_dataset
        assert (len(train), len(test)) == (7, 3)
        assert sorted(train.indices + test.indices) == list(range(10))

    def test_training_states_in_unit_box(self, small_dataset):
        train, _, _ = small_dataset
        assert train.states.min() == pytest.approx(0.0, abs=1e-15)
        assert train.states.max() == pytest.approx(1.0, abs=1e-15)

    def test_round_trip(self, small_dataset, bioreactor):
        train, test, normalizer = small_dataset
        for part in (train, test):
            raw = part.denormalize(normalizer)
            np.testing.assert_allclose(raw.normalize(normalizer).states, part.states, atol=1e-12)
            np.testing.assert_allclose(raw.outputs, bioreactor.eval_h(raw.states), atol=1e-15)
            assert np.all(raw.states > 0)

    def test_deviation_units(self, small_dataset, bioreactor):
        _, test, normalizer = small_dataset
        raw = test.denormalize(normalizer).states
        np.testing.assert_allclose(normalizer.to_deviation("x", test.states), raw - bioreactor.equilibrium(),
                                   atol=1e-15)

    def test_deterministic(self, bioreactor, small_dataset):
        again = build_dataset(bioreactor, 10, 60, LOGNORMAL, seed=5, t_s=0.1)
        for a, b in zip(small_dataset[:2], again[:2]):
            assert a.states.tobytes() == b.states.tobytes()
            assert a.inputs.tobytes() == b.inputs.tobytes()

    def test_trajectories_do_not_depend_on_m(self, bioreactor, small_dataset):
        # trajectory i uses its own substream, so a larger M extends rather than reshuffles
        train, test, normalizer = small_dataset
        bigger = build_dataset(bioreactor, 12, 60, LOGNORMAL, seed=5, t_s=0.1)
        raw_small = np.concatenate([train.denormalize(normalizer).states, test.denormalize(normalizer).states])
        ids_small = train.indices + test.indices
        tr, te, nm = bigger
        raw_big = dict(zip(tr.indices + te.indices,
                           np.concatenate([tr.denormalize(nm).states, te.denormalize(nm).states])))
        for i, states in zip(ids_small, raw_small):
            np.testing.assert_allclose(raw_big[i], states, atol=1e-15)

    def test_save_load_round_trip(self, tmp_path, small_dataset, bioreactor):
        train, test, normalizer = small_dataset
        save_dataset(tmp_path, bioreactor, train, test, normalizer)
        tr, te, nm, manifest = load_dataset(tmp_path)
        assert manifest["M"] == 10
        np.testing.assert_array_equal(tr.states, train.states)
        np.testing.assert_array_equal(te.outputs, test.outputs)
        np.testing.assert_array_equal(nm.high["x"], normalizer.high["x"])
        header = (tmp_path / f"traj_{train.indices[0]}_x.csv").read_text().splitlines()[0]
        assert header == "x1,x2"

    def test_saved_files_are_byte_reproducible(self, tmp_path, small_dataset, bioreactor):
        for name in ("a", "b"):
            train, test, normalizer = build_dataset(bioreactor, 10, 60, LOGNORMAL, seed=5, t_s=0.1)
            save_dataset(tmp_path / name, bioreactor, train, test, normalizer)
        assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ModelFileError):
            load_dataset(tmp_path)


def test_split_needs_two():
    with pytest.raises(ValueError):
        split_indices(1, 0.7, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 400), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_split_is_a_partition(M, ratio, seed):
    train, test = split_indices(M, ratio, seed)
    assert train and test
    assert sorted(train + test) == list(range(M))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=6, max_size=60))
def test_normalizer_round_trip(values):
    data = np.array(values[: len(values) // 2 * 2]).reshape(-1, 2)
    offsets = {"x": np.array([0.5, -0.5]), "y": np.zeros(2), "u": np.zeros(2)}
    nm = Normalizer.fit(offsets, x=data, y=data, u=data)
    np.testing.assert_allclose(nm.invert("x", nm.apply("x", data)), data, atol=1e-12 * (1 + np.abs(data).max()))
    again = Normalizer.from_dict(nm.to_dict())
    np.testing.assert_array_equal(again.apply("x", data), nm.apply("x", data))

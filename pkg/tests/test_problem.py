import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bymisim.problem import (
    DataAttack,
    GlobalObjective,
    GradAttack,
    GradientBatch,
    IpmAttack,
    LinearTask,
    NodeDataset,
    ParamAttack,
    apply_message_attack,
    batch_loss,
    generate_network_data,
    global_objective,
    identification_halves,
    load_datasets_csv,
    local_gradient,
    minibatch_gradient,
    optimality_gap,
    save_datasets_csv,
    shared_direction,
    split_dataset,
    stack_datasets,
    stacked_gradients,
)


def test_theta_star_is_sparse_ones():
    t = LinearTask(30)
    assert t.sparsity == 3
    assert t.theta_star.tolist() == [1.0] * 3 + [0.0] * 27
    assert LinearTask(9).sparsity == 0


def test_param_attack_center():
    theta_c = ParamAttack(mu_c=5.0, s_r=0.1).theta_c(30)
    assert theta_c.tolist() == [5.0] * 3 + [0.0] * 27


def test_param_attack_byzantine_responses_follow_theta_c():
    attack = ParamAttack(5.0, 0.1)
    data = generate_network_data(LinearTask(30, noise_std=0.0), 6, 40, {2}, attack, seed=1)
    byz = data[2]
    assert byz.is_byzantine
    np.testing.assert_allclose(byz.y, byz.x @ attack.theta_c(30), atol=1e-12)
    np.testing.assert_allclose(data[0].y, data[0].x @ LinearTask(30).theta_star, atol=1e-12)


def test_no_byzantine_means_all_clean():
    data = generate_network_data(LinearTask(5, noise_std=0.0), 4, 20, set(), ParamAttack(), seed=0)
    theta = LinearTask(5).theta_star
    for ds in data:
        assert not ds.is_byzantine
        np.testing.assert_allclose(ds.y, ds.x @ theta, atol=1e-12)


def test_data_attack_shifts_covariate_mean():
    d, n = 8, 10_000
    data = generate_network_data(LinearTask(d), 3, n, {1}, DataAttack(), seed=4)
    v = shared_direction(d, 4)
    assert abs(np.linalg.norm(v) - 1) < 1e-12 and np.all(v > 0)
    mean = data[1].x.mean(axis=0)
    se = 0.8 / np.sqrt(n)
    assert np.all(np.abs(mean - 3 * v) <= 5 * se)


def test_too_many_byzantine_rejected():
    with pytest.raises(ValueError, match="ratio"):
        generate_network_data(LinearTask(3), 4, 10, {0, 1}, None, seed=0)


def test_data_is_deterministic():
    a = generate_network_data(LinearTask(5), 5, 20, {3}, DataAttack(), seed=9)
    b = generate_network_data(LinearTask(5), 5, 20, {3}, DataAttack(), seed=9)
    for u, v in zip(a, b):
        assert u.x.tobytes() == v.x.tobytes() and u.y.tobytes() == v.y.tobytes()


def test_adding_nodes_keeps_existing_draws():
    a = generate_network_data(LinearTask(5), 5, 20, set(), None, seed=9)
    b = generate_network_data(LinearTask(5), 8, 20, set(), None, seed=9)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.x, v.x)


# ---------------------------------------------------------------- gradients


def dataset(n=30, d=4, seed=0):
    return generate_network_data(LinearTask(d), 1, n, set(), None, seed)[0]


def test_gradient_vanishes_at_batch_least_squares():
    ds = dataset()
    idx = np.arange(12)
    theta = np.linalg.lstsq(ds.x[idx], ds.y[idx], rcond=None)[0]
    assert np.max(np.abs(minibatch_gradient(theta, ds, idx).vector)) < 1e-10


def test_gradient_single_sample_at_zero():
    ds = dataset()
    g = minibatch_gradient(np.zeros(4), ds, [5])
    np.testing.assert_allclose(g.vector, -ds.y[5] * ds.x[5])
    assert g.batch_size == 1


def test_full_batch_is_mean_of_samples():
    ds = dataset()
    theta = np.arange(4.0)
    per = [minibatch_gradient(theta, ds, [i]).vector for i in range(ds.size)]
    np.testing.assert_allclose(local_gradient(theta, ds), np.mean(per, axis=0), atol=1e-12)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        minibatch_gradient(np.zeros(4), dataset(), [])
    with pytest.raises(ValueError):
        GradientBatch(np.zeros(2), 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), size=st.integers(1, 15))
def test_gradient_matches_finite_differences(seed, size):
    rng = np.random.default_rng(seed)
    ds = dataset(seed=seed)
    theta = rng.normal(size=4)
    idx = rng.integers(ds.size, size=size)
    g = minibatch_gradient(theta, ds, idx).vector
    h = 1e-5
    fd = np.array([
        (batch_loss(theta + h * e, ds, idx) - batch_loss(theta - h * e, ds, idx)) / (2 * h) for e in np.eye(4)
    ])
    assert np.linalg.norm(fd - g) <= 1e-6 * max(np.linalg.norm(g), 1e-8)


def test_stacked_gradients_match_per_node():
    data = generate_network_data(LinearTask(5), 4, 20, set(), None, seed=2)
    x, y = stack_datasets(data)
    rng = np.random.default_rng(0)
    thetas = rng.normal(size=(4, 5))
    idx = rng.integers(20, size=(4, 7))
    stacked = stacked_gradients(thetas, x, y, idx)
    for i, ds in enumerate(data):
        np.testing.assert_allclose(stacked[i], minibatch_gradient(thetas[i], ds, idx[i]).vector, atol=1e-12)


# ---------------------------------------------------------------- splits


def test_split_sizes():
    ds = split_dataset(dataset(n=100), 50, seed=1)
    assert ds.identification_indices.size == 50 and ds.warmup_indices.size == 50
    assert set(ds.identification_indices).isdisjoint(ds.warmup_indices)
    assert set(ds.identification_indices) | set(ds.warmup_indices) == set(range(100))
    h1, h2 = identification_halves(ds, seed=1)
    assert h1.size == h2.size == 25
    assert set(h1).isdisjoint(h2)
    assert set(h1) | set(h2) == set(ds.identification_indices)


def test_split_boundary_leaves_two_warmup_samples():
    assert split_dataset(dataset(n=100), 98, seed=0).warmup_indices.size == 2


def test_split_is_deterministic():
    a = split_dataset(dataset(n=100), 50, seed=7)
    b = split_dataset(dataset(n=100), 50, seed=7)
    np.testing.assert_array_equal(a.identification_indices, b.identification_indices)


def test_split_errors():
    with pytest.raises(ValueError, match="even"):
        split_dataset(dataset(n=100), 49, seed=0)
    with pytest.raises(ValueError):
        split_dataset(dataset(n=100), 100, seed=0)
    with pytest.raises(ValueError):
        identification_halves(dataset(), seed=0)


# ---------------------------------------------------------------- message attacks


def test_ipm_replaces_with_negative_clean_mean():
    clean = np.array([[1.0, 2.0], [3.0, 4.0], [9.0, 9.0]])
    out = apply_message_attack(IpmAttack(1.0), clean, {2})
    np.testing.assert_allclose(out[2], [-2.0, -3.0])
    np.testing.assert_array_equal(out[:2], clean[:2])


def test_ipm_scaling():
    clean = np.array([[1.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
    out = apply_message_attack(IpmAttack(2.0), clean, [2])
    np.testing.assert_allclose(out[2], [-2.0, 0.0])


def test_no_byzantine_messages_unchanged():
    clean = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(apply_message_attack(IpmAttack(), clean, []), clean)


def test_grad_attack_statistics():
    rng = np.random.default_rng(0)
    clean = rng.normal(loc=1.0, size=(50, 3))
    out = apply_message_attack(GradAttack(), clean, range(40, 50), np.random.default_rng(1))
    normal = clean[:40]
    assert not np.allclose(out[40:], clean[40:])
    # the Gaussian offset dominates: spread is about 20x the normal std
    spread = np.std(out[40:] - 0.5 * normal.mean(axis=0), axis=0)
    assert np.all(spread > 5 * normal.std(axis=0))


def test_data_level_attack_rejected_as_message_attack():
    with pytest.raises(ValueError, match="data-level"):
        apply_message_attack(ParamAttack(), np.zeros((3, 2)), [0])


# ---------------------------------------------------------------- objective


def test_gap_zero_at_minimizer_and_nonnegative():
    data = generate_network_data(LinearTask(6), 5, 30, {4}, ParamAttack(5, 0.5), seed=3)
    obj = GlobalObjective.from_datasets(data)
    assert abs(obj.gap(obj.theta_hat)) <= 1e-12
    rng = np.random.default_rng(0)
    assert np.all(obj.gap(rng.normal(size=(100, 6)) * 3) >= 0)
    assert np.linalg.norm(obj.gradient(obj.theta_hat)) < 1e-10


def test_gap_on_toy_dataset_by_hand():
    x = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    y = np.array([1.0, 2.0, 3.0])
    ds = [NodeDataset(0, x, y)]
    # f(theta) = (1/6) sum (x^T theta - y)^2; f(0) = (1 + 4 + 9) / 6
    assert global_objective(np.zeros(2), ds) == pytest.approx(14 / 6)
    theta_hat = np.linalg.solve(x.T @ x, x.T @ y)
    f_hat = np.sum((x @ theta_hat - y) ** 2) / 6
    assert optimality_gap(np.zeros(2), ds) == pytest.approx(14 / 6 - f_hat, abs=1e-12)


def test_objective_ignores_byzantine_nodes():
    data = generate_network_data(LinearTask(4), 5, 30, {0}, ParamAttack(5, 0.5), seed=3)
    obj = GlobalObjective.from_datasets(data)
    clean = GlobalObjective.from_datasets(data[1:])
    np.testing.assert_allclose(obj.theta_hat, clean.theta_hat)


def test_singular_design_rejected():
    ds = [NodeDataset(0, np.array([[1.0, 1.0], [2.0, 2.0]]), np.array([1.0, 2.0]))]
    with pytest.raises(np.linalg.LinAlgError, match="condition number"):
        GlobalObjective.from_datasets(ds)


def test_heterogeneity_scales_like_inverse_sample_size():
    def avg_heterogeneity(n):
        vals = []
        for seed in range(30):
            data = generate_network_data(LinearTask(10), 20, n, set(), None, seed)
            theta = LinearTask(10).theta_star
            grads = np.array([local_gradient(theta, ds) for ds in data])
            vals.append(np.max(np.sum((grads - grads.mean(axis=0)) ** 2, axis=1)))
        return np.mean(vals)

    ratio = avg_heterogeneity(100) / avg_heterogeneity(200)
    assert 2 * 0.6 <= ratio <= 2 * 1.4


def test_normal_nodes_share_distribution():
    data = generate_network_data(LinearTask(3), 10, 4000, set(), None, seed=5)
    means = np.array([ds.x.mean(axis=0) for ds in data])
    assert np.all(np.abs(means) < 5 / np.sqrt(4000))
    stds = np.array([ds.y.std() for ds in data])
    assert np.ptp(stds) < 0.15


# ---------------------------------------------------------------- CSV


def test_dataset_csv_roundtrip(tmp_path):
    data = generate_network_data(LinearTask(3), 3, 10, {1}, ParamAttack(), seed=0)
    data = [split_dataset(ds, 4, 0) for ds in data]
    save_datasets_csv(tmp_path, data)
    back = load_datasets_csv(tmp_path)
    for a, b in zip(data, back):
        assert a.node_id == b.node_id and a.is_byzantine == b.is_byzantine
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.identification_indices, b.identification_indices)

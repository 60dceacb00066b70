import numpy as np
import pytest

from fodfom.trainer import (
    ModelParams,
    TrainConfig,
    UndefinedSupConError,
    backward,
    forward,
    init_params,
    init_sgd_state,
    learning_rate,
    load_params,
    loss_ce,
    loss_supcon,
    save_params,
    sgd_step,
    total_loss,
    train,
)

from oracles import (
    ce_high_precision,
    finite_difference_grads,
    max_grad_error,
    supcon_double_loop,
)


def straight_line_forward(params: ModelParams, x: np.ndarray):
    """Independent re-implementation of the forward pass, no shared helpers."""
    h = np.array(x, dtype=np.float64)
    for layer in params.encoder:
        h = h @ layer.weight.T + layer.bias
        h[h < 0] = 0.0
    logits = h @ params.head.weight.T + params.head.bias
    a = h @ params.proj1.weight.T + params.proj1.bias
    mu = a.sum(axis=0) / a.shape[0]
    var = ((a - mu) ** 2).sum(axis=0) / a.shape[0]
    xhat = (a - mu) / np.sqrt(var + params.proj_bn.eps)
    a = params.proj_bn.gamma * xhat + params.proj_bn.beta
    a[a < 0] = 0.0
    z = a @ params.proj2.weight.T + params.proj2.bias
    return logits, z


def test_zero_head_gives_zero_logits():
    params = init_params(feature_dim=4, num_classes=2, encoder_dims=(), seed=0)
    params.head.weight[:] = 0.0
    params.head.bias[:] = 0.0
    cache = forward(params, np.random.default_rng(0).normal(size=(3, 4)))
    assert np.array_equal(cache.logits, np.zeros((3, 3)))


def test_training_batch_of_one_rejected():
    params = init_params(feature_dim=4, num_classes=2, seed=0)
    with pytest.raises(ValueError):
        forward(params, np.zeros((1, 4)), training=True)
    forward(params, np.zeros((1, 4)), training=False)  # eval mode is fine


def test_forward_matches_straight_line_reimplementation():
    rng = np.random.default_rng(42)
    params = init_params(feature_dim=5, num_classes=3, encoder_dims=(6,), proj_dim=7, seed=1)
    x = rng.normal(size=(8, 5))
    cache = forward(params, x, training=True)
    logits, z = straight_line_forward(params, x)
    assert np.abs(cache.logits - logits).max() < 1e-6
    assert np.abs(cache.z - z).max() < 1e-6


def test_eval_mode_uses_running_stats():
    params = init_params(feature_dim=4, num_classes=2, seed=0)
    x = np.random.default_rng(1).normal(size=(6, 4))
    before = params.proj_bn.running_mean.copy()
    forward(params, x, training=False)
    assert np.array_equal(params.proj_bn.running_mean, before)
    forward(params, x, training=True)
    assert not np.array_equal(params.proj_bn.running_mean, before)


def test_ce_uniform_logits():
    logits = np.zeros((5, 3))
    assert loss_ce(logits, np.array([0, 1, 2, 0, 1])) == pytest.approx(np.log(3.0))


def test_ce_confident_correct_is_near_zero():
    logits = np.zeros((1, 4))
    logits[0, 2] = 1e4
    assert loss_ce(logits, np.array([2])) == pytest.approx(0.0, abs=1e-12)


def test_ce_matches_high_precision_oracle():
    rng = np.random.default_rng(8)
    logits = rng.normal(scale=3.0, size=(4, 5))
    labels = rng.integers(0, 5, size=4)
    assert loss_ce(logits, labels) == pytest.approx(
        ce_high_precision(logits, labels), abs=1e-10
    )


def test_ce_shift_invariance():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    shifted = logits + rng.normal(size=(6, 1))
    assert loss_ce(logits, labels) == pytest.approx(
        loss_ce(shifted, labels), abs=1e-9
    )


def test_supcon_identical_pair_is_zero():
    z = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert loss_supcon(z, np.array([0, 0]), 0.1) == pytest.approx(0.0, abs=1e-12)


def test_supcon_no_positives_is_undefined():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(UndefinedSupConError):
        loss_supcon(z, np.array([0, 1]), 0.1)


def test_supcon_matches_double_loop_oracle():
    rng = np.random.default_rng(10)
    z = rng.normal(size=(4, 6))
    labels = np.array([0, 0, 1, 1])
    assert loss_supcon(z, labels, 0.1) == pytest.approx(
        supcon_double_loop(z, labels, 0.1), abs=1e-10
    )


def test_supcon_mixed_anchor_skips_match_oracle():
    rng = np.random.default_rng(12)
    z = rng.normal(size=(5, 4))
    labels = np.array([0, 0, 1, 2, 0])  # anchors 2 and 3 have no positive
    assert loss_supcon(z, labels, 0.25) == pytest.approx(
        supcon_double_loop(z, labels, 0.25), abs=1e-10
    )


def test_supcon_scale_invariance():
    rng = np.random.default_rng(11)
    z = rng.normal(size=(6, 5))
    labels = np.array([0, 0, 1, 1, 2, 2])
    scaled = z * rng.uniform(0.1, 10.0, size=(6, 1))
    assert loss_supcon(z, labels, 0.1) == pytest.approx(
        loss_supcon(scaled, labels, 0.1), abs=1e-9
    )


def test_losses_permutation_invariant():
    rng = np.random.default_rng(13)
    z = rng.normal(size=(6, 4))
    logits = rng.normal(size=(6, 4))
    labels = np.array([0, 0, 1, 1, 2, 2])
    perm = rng.permutation(6)
    assert loss_supcon(z, labels, 0.1) == pytest.approx(
        loss_supcon(z[perm], labels[perm], 0.1), abs=1e-12
    )
    assert loss_ce(logits, labels) == pytest.approx(
        loss_ce(logits[perm], labels[perm]), abs=1e-12
    )


def _param_arrays(params: ModelParams):
    arrays = []
    for layer in params.encoder:
        arrays += [layer.weight, layer.bias]
    arrays += [
        params.head.weight,
        params.head.bias,
        params.proj1.weight,
        params.proj1.bias,
        params.proj_bn.gamma,
        params.proj_bn.beta,
        params.proj2.weight,
        params.proj2.bias,
    ]
    return arrays


def _grad_arrays(grads):
    arrays = []
    for layer in grads.encoder:
        arrays += [layer.weight, layer.bias]
    arrays += [
        grads.head.weight,
        grads.head.bias,
        grads.proj1.weight,
        grads.proj1.bias,
        grads.proj_bn_gamma,
        grads.proj_bn_beta,
        grads.proj2.weight,
        grads.proj2.bias,
    ]
    return arrays


def check_grads_against_fd(seed: int, lam: float, encoder_dims=(6,)) -> float:
    rng = np.random.default_rng(seed)
    params = init_params(
        feature_dim=5, num_classes=3, encoder_dims=encoder_dims, proj_dim=8, seed=seed
    )
    x = rng.normal(size=(8, 5))
    labels = rng.integers(0, 4, size=8)
    while len(np.unique(labels)) == len(labels):  # ensure some positives exist
        labels = rng.integers(0, 4, size=8)
    grads, _, _ = backward(params, x, labels, lam, 0.1)
    fd = finite_difference_grads(
        lambda: total_loss(params, x, labels, lam, 0.1), _param_arrays(params)
    )
    return max_grad_error(_grad_arrays(grads), fd)


def test_gradients_match_fd_ce_only():
    assert check_grads_against_fd(seed=100, lam=0.0) <= 1e-4


def test_gradients_match_fd_combined():
    assert check_grads_against_fd(seed=101, lam=1.0) <= 1e-4


def test_gradients_match_fd_identity_encoder():
    # seed chosen so no pre-ReLU activation sits within the h=1e-3 step of
    # its kink, where central differences stop being a valid oracle
    assert check_grads_against_fd(seed=104, lam=0.7, encoder_dims=()) <= 1e-4


def test_supcon_path_alone_matches_fd():
    rng = np.random.default_rng(103)
    params = init_params(feature_dim=4, num_classes=2, encoder_dims=(5,), proj_dim=6, seed=103)
    x = rng.normal(size=(6, 4))
    labels = np.array([0, 0, 1, 1, 2, 2])
    g1, _, _ = backward(params, x, labels, 0.0, 0.1)
    g2, _, _ = backward(params, x, labels, 1.0, 0.1)
    sc_grads = [b - a for a, b in zip(_grad_arrays(g1), _grad_arrays(g2))]

    def sc_loss():
        cache = forward(params, x, training=True)
        return loss_supcon(cache.z, labels, 0.1)

    fd = finite_difference_grads(sc_loss, _param_arrays(params))
    assert max_grad_error(sc_grads, fd) <= 1e-4


def test_lam_zero_leaves_projection_grads_zero():
    rng = np.random.default_rng(14)
    params = init_params(feature_dim=4, num_classes=2, encoder_dims=(5,), seed=2)
    x = rng.normal(size=(6, 4))
    labels = rng.integers(0, 3, size=6)
    grads, _, sc = backward(params, x, labels, 0.0, 0.1)
    assert sc == 0.0
    assert np.array_equal(grads.proj1.weight, np.zeros_like(grads.proj1.weight))
    assert np.array_equal(grads.proj2.weight, np.zeros_like(grads.proj2.weight))
    assert np.array_equal(grads.proj_bn_gamma, np.zeros_like(grads.proj_bn_gamma))


def test_doubling_lam_doubles_projection_grads():
    rng = np.random.default_rng(15)
    params = init_params(feature_dim=4, num_classes=2, encoder_dims=(), proj_dim=6, seed=3)
    x = rng.normal(size=(6, 4))
    labels = np.array([0, 0, 1, 1, 2, 2])
    g1, _, _ = backward(params, x, labels, 1.0, 0.1)
    g2, _, _ = backward(params, x, labels, 2.0, 0.1)
    assert np.array_equal(g2.proj1.weight, 2.0 * g1.proj1.weight)
    assert np.array_equal(g2.proj2.weight, 2.0 * g1.proj2.weight)
    assert np.array_equal(g2.proj_bn_gamma, 2.0 * g1.proj_bn_gamma)


def test_backward_propagates_undefined_supcon():
    rng = np.random.default_rng(16)
    params = init_params(feature_dim=3, num_classes=2, seed=4)
    x = rng.normal(size=(2, 3))
    with pytest.raises(UndefinedSupConError):
        backward(params, x, np.array([0, 1]), 1.0, 0.1)


def test_sgd_zero_grads_is_fixed_point():
    params = init_params(feature_dim=3, num_classes=2, seed=5)
    config = TrainConfig(weight_decay=0.0, batch_size=4, epochs=1)
    state = init_sgd_state(params)
    before = params.head.weight.copy()
    zero_grads, _, _ = backward(params, np.zeros((2, 3)), np.array([0, 0]), 0.0, 0.1)
    for arr in _grad_arrays(zero_grads):
        arr[:] = 0.0
    sgd_step(params, zero_grads, state, config, epoch=0)
    assert np.array_equal(params.head.weight, before)


def test_lr_drops_by_factor_ten_at_milestone():
    config = TrainConfig(base_lr=0.05, milestones=(100, 150), batch_size=64, epochs=200)
    assert learning_rate(config, 99) == pytest.approx(0.05)
    assert learning_rate(config, 100) == pytest.approx(0.005)
    assert learning_rate(config, 150) == pytest.approx(0.0005)
    assert learning_rate(config, 99) / learning_rate(config, 100) == pytest.approx(10.0)


def test_warmup_only_above_256_batch():
    big = TrainConfig(base_lr=0.05, warmup_epochs=10, warmup_start_lr=0.01,
                      batch_size=512, epochs=20, milestones=())
    small = TrainConfig(base_lr=0.05, warmup_epochs=10, warmup_start_lr=0.01,
                        batch_size=128, epochs=20, milestones=())
    assert learning_rate(big, 0) == pytest.approx(0.01)
    assert learning_rate(big, 5) == pytest.approx(0.01 + 0.04 * 0.5)
    assert learning_rate(big, 10) == pytest.approx(0.05)
    assert learning_rate(small, 0) == pytest.approx(0.05)


def test_sgd_matches_momentum_recursion_on_quadratic():
    # minimize 0.5 * w^2 by hand: v <- 0.9 v + w; w <- w - lr * v
    params = init_params(feature_dim=1, num_classes=0, encoder_dims=(), proj_dim=1, seed=6)
    params.head.weight[:] = 2.0  # single scalar weight
    config = TrainConfig(
        base_lr=0.1, momentum=0.9, weight_decay=0.0, milestones=(),
        batch_size=4, epochs=3, warmup_epochs=0,
    )
    state = init_sgd_state(params)
    w, v = 2.0, 0.0
    for step in range(3):
        grads, _, _ = backward(params, np.zeros((2, 1)), np.array([0, 0]), 0.0, 0.1)
        for arr in _grad_arrays(grads):
            arr[:] = 0.0
        grads.head.weight[:] = params.head.weight  # gradient of 0.5 w^2
        sgd_step(params, grads, state, config, epoch=0)
        v = 0.9 * v + w
        w = w - 0.1 * v
        assert abs(params.head.weight[0, 0] - w) < 1e-12


def _two_cluster_data(seed=0, n=40):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, 4)) * 0.4 + np.array([2.0, 0, 0, 0])
    b = rng.normal(size=(n, 4)) * 0.4 + np.array([-2.0, 0, 0, 0])
    dirs = rng.normal(size=(n, 4))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ring = dirs * 4.0
    features = np.concatenate([a, b, ring])
    labels = np.concatenate([np.zeros(n, int), np.ones(n, int), np.full(n, 2)])
    return features, labels


def test_train_descends():
    features, labels = _two_cluster_data()
    config = TrainConfig(
        lam=1.0, base_lr=0.02, batch_size=32, epochs=50, milestones=(30, 42),
        seed=0, encoder_dims=(8,), proj_dim=16,
    )
    _, logs = train(features, labels, num_classes=2, config=config)
    assert logs[-1].ce < logs[0].ce


def test_train_deterministic_bit_identical(tmp_path):
    features, labels = _two_cluster_data(seed=3)
    config = TrainConfig(
        lam=1.0, base_lr=0.02, batch_size=32, epochs=8, milestones=(),
        seed=7, encoder_dims=(8,), proj_dim=16,
    )
    p1, _ = train(features, labels, 2, config)
    p2, _ = train(features, labels, 2, config)
    save_params(p1, tmp_path / "a.fodf")
    save_params(p2, tmp_path / "b.fodf")
    assert (tmp_path / "a.fodf").read_bytes() == (tmp_path / "b.fodf").read_bytes()
    assert np.array_equal(p1.head.weight, p2.head.weight)
    assert np.array_equal(p1.proj2.weight, p2.proj2.weight)


def intra_class_mean_cosine(z: np.ndarray, labels: np.ndarray) -> float:
    zhat = z / np.linalg.norm(z, axis=1, keepdims=True)
    sims = []
    for c in np.unique(labels):
        rows = zhat[labels == c]
        s = rows @ rows.T
        n = len(rows)
        sims.append((s.sum() - n) / (n * (n - 1)))
    return float(np.mean(sims))


def test_supcon_compacts_projections_over_seeds():
    features, labels = _two_cluster_data(seed=1, n=30)
    deltas = []
    for seed in range(5):
        out = {}
        for lam in (0.0, 1.0):
            config = TrainConfig(
                lam=lam, base_lr=0.02, batch_size=32, epochs=40, milestones=(25, 35),
                seed=seed, encoder_dims=(8,), proj_dim=16,
            )
            params, _ = train(features, labels, 2, config)
            cache = forward(params, features, training=False)
            out[lam] = intra_class_mean_cosine(cache.z, labels)
        deltas.append(out[1.0] - out[0.0])
    assert np.median(deltas) > 0.0


def test_params_round_trip(tmp_path):
    params = init_params(feature_dim=5, num_classes=3, encoder_dims=(6,), proj_dim=8, seed=9)
    save_params(params, tmp_path / "p.fodf")
    back = load_params(tmp_path / "p.fodf")
    assert back.num_classes == 3
    assert np.allclose(back.head.weight, params.head.weight, atol=1e-7)
    assert np.allclose(back.proj_bn.running_var, params.proj_bn.running_var, atol=1e-7)
    assert len(back.encoder) == 1


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lam=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(milestones=(10, 10))

import numpy as np
import pytest

from sue.errors import ConfigError, NumericalError
from sue.graph import build_affinity
from sue.nn import (
    Adam,
    EpochRecord,
    MmdKernel,
    Mlp,
    TrainConfig,
    cholesky_orthonormalize,
    contrastive_loss_grad,
    mmd_sq,
    mmd_sq_grad,
    spectralnet_loss_grad,
    train_contrastive,
    train_mmd_residual,
    write_history_csv,
)


def flat(arrays):
    return np.concatenate([a.ravel() for a in arrays])


def fd_param_grad(loss_fn, net, eps=1e-4):
    """Central finite differences over every parameter entry."""
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + eps
            lp = loss_fn()
            p[idx] = old - eps
            lm = loss_fn()
            p[idx] = old
            g[idx] = (lp - lm) / (2 * eps)
            it.iternext()
        grads.append(g)
    return flat(grads)


class TestForward:
    def test_residual_zero_init_is_identity(self, rng):
        net = Mlp([4, 8, 4], residual=True, zero_init_last=True, seed=0)
        x = rng.standard_normal((6, 4))
        np.testing.assert_array_equal(net.forward(x), x)

    def test_single_linear_identity_weights(self):
        net = Mlp([3, 3], seed=0)
        net.weights[0][...] = np.eye(3)
        net.biases[0][...] = 0.0
        x = np.arange(6, dtype=np.float64).reshape(2, 3)
        np.testing.assert_array_equal(net.forward(x), x)

    def test_hand_computed_tiny_net(self):
        """2-2-2 relu net with fixed weights matches explicit arithmetic."""
        net = Mlp([2, 2, 2], activation="relu", seed=0)
        net.weights[0][...] = [[1.0, -1.0], [0.5, 2.0]]
        net.biases[0][...] = [0.1, -0.2]
        net.weights[1][...] = [[2.0, 0.0], [1.0, 1.0]]
        net.biases[1][...] = [0.0, 0.3]
        x = np.array([[1.0, 2.0]])
        h = np.maximum([[1.0 * 1 + 2 * 0.5 + 0.1, 1.0 * -1 + 2 * 2.0 - 0.2]], 0.0)
        expected = h @ np.array([[2.0, 0.0], [1.0, 1.0]]) + np.array([0.0, 0.3])
        np.testing.assert_allclose(net.forward(x), expected, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ConfigError):
            Mlp([3, 2]).forward(rng.standard_normal((4, 5)))

    def test_residual_needs_matching_dims(self):
        with pytest.raises(ConfigError):
            Mlp([3, 8, 4], residual=True)


class TestBackward:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        """Quadratic loss gradient vs central differences on random tiny nets."""
        rng = np.random.default_rng(seed)
        activation = "relu" if seed % 2 else "tanh"
        residual = seed % 3 == 0
        dims = [3, 4, 3] if residual else [3, 5, 2]
        net = Mlp(dims, activation=activation, residual=residual, seed=seed)
        x = rng.standard_normal((7, 3))
        target = rng.standard_normal((7, dims[-1]))

        def loss():
            return 0.5 * float(np.sum((net.forward(x) - target) ** 2))

        out, cache = net.forward_cache(x)
        grads, _ = net.backward(cache, out - target)
        ga, gn = flat(grads), fd_param_grad(loss, net)
        assert np.linalg.norm(ga - gn) <= 1e-4 * max(np.linalg.norm(gn), 1e-12)

    def test_zero_upstream_gives_zero_grads(self, rng):
        net = Mlp([3, 4, 2], seed=1)
        _, cache = net.forward_cache(rng.standard_normal((5, 3)))
        grads, _ = net.backward(cache, np.zeros((5, 2)))
        assert all(np.all(g == 0.0) for g in grads)

    def test_linear_layer_analytic_gradient(self, rng):
        """For f(x) = Wx and loss ||f||^2/2, dW = x^T (Wx)."""
        net = Mlp([3, 2], seed=2)
        x = rng.standard_normal((4, 3))
        out, cache = net.forward_cache(x)
        grads, _ = net.backward(cache, out)
        np.testing.assert_allclose(grads[0], x.T @ out, atol=1e-12)


class TestCholeskyOrthonormalize:
    def test_gram_is_identity(self, rng):
        y, _ = cholesky_orthonormalize(rng.standard_normal((50, 4)))
        np.testing.assert_allclose(y.T @ y / 50, np.eye(4), atol=1e-10)

    def test_weighted_gram_is_identity(self, rng):
        w = rng.uniform(0.5, 2.0, 50)
        y, _ = cholesky_orthonormalize(rng.standard_normal((50, 4)), w)
        p = w / w.sum()
        np.testing.assert_allclose(y.T @ (p[:, None] * y), np.eye(4), atol=1e-10)

    def test_collapsed_outputs_rejected(self):
        with pytest.raises(NumericalError, match="Gram"):
            cholesky_orthonormalize(np.ones((10, 3)))

    def test_gradient_through_layer(self, rng):
        """Audit the whitening backward against finite differences."""
        net = Mlp([3, 5, 2], activation="tanh", out_transform="cholesky_orthonormalize", seed=3)
        x = rng.standard_normal((9, 3))
        c = rng.standard_normal((9, 2))

        def loss():
            return float(np.sum(net.forward(x) * c))

        _, cache = net.forward_cache(x)
        grads, _ = net.backward(cache, c)
        ga, gn = flat(grads), fd_param_grad(loss, net)
        assert np.linalg.norm(ga - gn) <= 1e-4 * np.linalg.norm(gn)


class TestMmd:
    def test_identical_batches_zero(self, rng):
        x = rng.standard_normal((40, 3))
        v = mmd_sq(x, x.copy(), MmdKernel(bandwidths=(1.0,)))
        assert abs(v) <= 1e-12

    def test_singleton_closed_form(self):
        """m1 = m2 = 1 with one RBF bandwidth reduces to 2 - 2 exp(.)."""
        x = np.array([[0.0, 0.0]])
        y = np.array([[1.0, 2.0]])
        sigma = 1.7
        v = mmd_sq(x, y, MmdKernel(bandwidths=(sigma,)))
        expected = 2.0 - 2.0 * np.exp(-5.0 / (2.0 * sigma**2))
        assert v == pytest.approx(expected, abs=1e-12)

    def test_gaussian_shift_matches_naive_oracle(self):
        """Row-by-row double-loop oracle on two 1-D Gaussian samples."""
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2000, 1))
        y = rng.standard_normal((2000, 1)) + 3.0
        kernel = MmdKernel(bandwidths=(0.5, 1.0, 2.0))
        v = mmd_sq(x, y, kernel)

        def naive_term(a, b):
            total = 0.0
            for i in range(a.shape[0]):
                diff = a[i] - b  # explicit pairwise differences
                sq = np.sum(diff * diff, axis=1)
                for s in (0.5, 1.0, 2.0):
                    total += float(np.exp(-sq / (2 * s * s)).sum())
            return total

        m = 2000
        expected = (
            naive_term(x, x) / m**2 - 2 * naive_term(x, y) / m**2 + naive_term(y, y) / m**2
        )
        assert v > 0.1
        assert v == pytest.approx(expected, abs=1e-10)

    def test_symmetry(self, rng):
        x = rng.standard_normal((30, 4))
        y = rng.standard_normal((25, 4)) + 0.5
        k = MmdKernel(bandwidths=(0.7, 1.9))
        assert abs(mmd_sq(x, y, k) - mmd_sq(y, x, k)) <= 1e-12

    def test_dim_mismatch(self, rng):
        with pytest.raises(ConfigError):
            mmd_sq(rng.standard_normal((3, 2)), rng.standard_normal((3, 3)))

    def test_input_gradients_match_finite_differences(self, rng):
        x = rng.standard_normal((6, 3))
        y = rng.standard_normal((5, 3))
        k = MmdKernel(bandwidths=(0.8, 1.5))
        _, dx, dy = mmd_sq_grad(x, y, k)
        eps = 1e-5
        for arr, grad in ((x, dx), (y, dy)):
            fd = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                old = arr[idx]
                arr[idx] = old + eps
                lp = mmd_sq(x, y, k)
                arr[idx] = old - eps
                lm = mmd_sq(x, y, k)
                arr[idx] = old
                fd[idx] = (lp - lm) / (2 * eps)
                it.iternext()
            assert np.linalg.norm(grad - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-12)


class TestTrainMmdResidual:
    def test_same_distribution_stays_near_identity(self, rng):
        """Training on two samples of one Gaussian leaves the net near identity."""
        src = rng.standard_normal((600, 4))
        tgt = rng.standard_normal((600, 4))
        net = Mlp([4, 32, 32, 4], residual=True, zero_init_last=True, seed=0)
        cfg = TrainConfig(epochs=40, batch_size=128, seed=0, optimizer="adamw")
        net, _ = train_mmd_residual(net, src, tgt, cfg)
        moved = np.linalg.norm(net.forward(src) - src, axis=1).mean()
        assert moved <= 0.1 * np.linalg.norm(src, axis=1).mean()

    def test_shift_is_recovered(self, rng):
        """With target = source + c the trained mean moves to the target mean."""
        src = rng.standard_normal((800, 3))
        shift = np.array([2.0, -1.0, 1.5])
        tgt = rng.standard_normal((800, 3)) + shift
        net = Mlp([3, 64, 64, 3], residual=True, zero_init_last=True, seed=1)
        cfg = TrainConfig(epochs=120, batch_size=256, seed=1, optimizer="adamw",
                          early_stop_patience=0)
        net, history = train_mmd_residual(net, src, tgt, cfg)
        gap = np.linalg.norm(net.forward(src).mean(axis=0) - tgt.mean(axis=0))
        assert gap <= 0.2 * np.linalg.norm(shift)
        assert history[-1].val_loss <= history[0].val_loss

    def test_zero_epochs_is_identity(self, rng):
        src = rng.standard_normal((50, 3))
        tgt = rng.standard_normal((50, 3))
        net = Mlp([3, 8, 3], residual=True, zero_init_last=True, seed=2)
        cfg = TrainConfig(epochs=0, batch_size=16, seed=0)
        net, history = train_mmd_residual(net, src, tgt, cfg)
        np.testing.assert_array_equal(net.forward(src), src)
        assert len(history) == 1

    def test_best_epoch_no_worse_than_start(self, rng):
        src = rng.standard_normal((300, 3)) * 2.0
        tgt = rng.standard_normal((300, 3))
        net = Mlp([3, 16, 3], residual=True, zero_init_last=True, seed=3)
        cfg = TrainConfig(epochs=15, batch_size=64, seed=0)
        net, history = train_mmd_residual(net, src, tgt, cfg)
        assert min(r.val_loss for r in history) <= history[0].val_loss

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_parameters_abort_with_epoch(self, rng):
        net = Mlp([2, 4, 2], residual=True, seed=0)
        net.weights[0][0, 0] = np.inf
        cfg = TrainConfig(epochs=3, batch_size=8, seed=0)
        with pytest.raises(NumericalError, match="epoch"):
            train_mmd_residual(net, rng.standard_normal((40, 2)), rng.standard_normal((40, 2)), cfg)

    def test_deterministic_history(self, rng):
        src = rng.standard_normal((200, 3))
        tgt = rng.standard_normal((200, 3)) + 1.0
        runs = []
        for _ in range(2):
            net = Mlp([3, 16, 3], residual=True, zero_init_last=True, seed=7)
            cfg = TrainConfig(epochs=10, batch_size=64, seed=7)
            _, history = train_mmd_residual(net, src, tgt, cfg)
            runs.append([(repr(r.train_loss), repr(r.val_loss)) for r in history])
        assert runs[0] == runs[1]


class TestTrainContrastive:
    def test_initial_loss_of_aligned_orthogonal_pairs(self):
        """Two aligned orthogonal pairs: loss from the explicit softmax."""
        zx = np.array([[1.0, 0.0], [0.0, 1.0]])
        zy = zx.copy()
        tau = 0.5
        loss, _, _ = contrastive_loss_grad(zx, zy, tau)
        # logits rows: [1/tau, 0], [0, 1/tau]; CE = -log softmax(diagonal)
        expected = -np.log(np.exp(1 / tau) / (np.exp(1 / tau) + 1.0))
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_large_temperature_approaches_log_m(self, rng):
        m = 8
        zx = rng.standard_normal((m, 3))
        zy = rng.standard_normal((m, 3))
        loss, _, _ = contrastive_loss_grad(zx, zy, 1e9)
        assert loss == pytest.approx(np.log(m), abs=1e-6)

    def test_overfits_small_pair_set(self, rng):
        """100 synthetic pairs reach train recall@1 >= 90%."""
        from sue.evaluation import recall_at_k

        base = rng.standard_normal((100, 6))
        px = base + 0.05 * rng.standard_normal((100, 6))
        py = np.tanh(base) + 0.05 * rng.standard_normal((100, 6))
        net_x = Mlp([6, 64, 8], seed=0)
        net_y = Mlp([6, 64, 8], seed=1)
        cfg = TrainConfig(epochs=300, batch_size=100, seed=0, optimizer="adamw")
        train_contrastive(net_x, net_y, px, py, cfg)
        r = recall_at_k(net_x.forward(px), net_y.forward(py), [1])
        assert r[1] >= 90.0

    def test_single_pair_rejected(self, rng):
        with pytest.raises(ConfigError):
            train_contrastive(
                Mlp([2, 2]), Mlp([2, 2]),
                rng.standard_normal((1, 2)), rng.standard_normal((1, 2)),
                TrainConfig(epochs=1, batch_size=2, seed=0),
            )

    def test_loss_decreases(self, rng):
        px = rng.standard_normal((50, 4))
        py = rng.standard_normal((50, 4))
        net_x = Mlp([4, 16, 4], seed=0)
        net_y = Mlp([4, 16, 4], seed=1)
        cfg = TrainConfig(epochs=60, batch_size=50, seed=0)
        _, _, history = train_contrastive(net_x, net_y, px, py, cfg)
        assert history[-1].train_loss < history[0].train_loss


class TestSpectralnetLoss:
    def test_gradient_matches_finite_differences(self, rng):
        pts = rng.standard_normal((14, 3))
        graph = build_affinity(pts, k=4, metric="euclidean")
        net = Mlp([3, 6, 2], activation="tanh", out_transform="cholesky_orthonormalize", seed=4)

        def loss():
            y = net.forward(pts, ortho_weights=graph.degrees)
            lap_y = graph.degrees[:, None] * y - graph.w @ y
            return float(np.sum(y * lap_y) / graph.degrees.sum())

        _, grads = spectralnet_loss_grad(net, pts, graph)
        ga, gn = flat(grads), fd_param_grad(loss, net)
        assert np.linalg.norm(ga - gn) <= 1e-4 * np.linalg.norm(gn)

    def test_requires_orthonormalising_output(self, rng):
        from sue.nn import train_spectralnet

        with pytest.raises(ConfigError):
            train_spectralnet(Mlp([3, 4, 2]), rng.standard_normal((30, 3)),
                              TrainConfig(epochs=1, batch_size=16, seed=0))


class TestAdam:
    def test_decoupled_decay_on_weights_only(self):
        params = [np.ones((2, 2)), np.ones(2)]
        opt = Adam(params, lr=0.1, weight_decay=0.5, decoupled=True)
        opt.step(params, [np.zeros((2, 2)), np.zeros(2)])
        assert params[0][0, 0] < 1.0  # decayed
        assert params[1][0] == 1.0  # bias untouched

    def test_checkpoint_round_trip(self, tmp_path, rng):
        net = Mlp([3, 5, 2], activation="tanh", residual=False, seed=9)
        path = tmp_path / "net.npz"
        net.save(path)
        back = Mlp.load(path)
        x = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(back.forward(x), net.forward(x))

    def test_history_csv(self, tmp_path):
        hist = [EpochRecord(0, float("nan"), 0.5), EpochRecord(1, 0.25, 0.4)]
        path = tmp_path / "h.csv"
        write_history_csv(hist, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss"
        assert lines[2].startswith("1,0.25,")


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=1)
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="sgd")

"""Minimal dense network engine: forward, backprop, Adam/AdamW.

Powers three trainable objectives:

* squared-MMD between two batches under a mixture-of-RBF kernel,
  as a biased V-statistic with diagonal terms included;
* the graph Rayleigh-quotient objective tr(Y^T (D - W) Y) / sum(D), with
  outputs kept orthonormal in the degree inner product by a
  differentiable Cholesky whitening layer;
* symmetric cross-entropy over a temperature-scaled cosine-similarity
  matrix of paired batches.

Everything is float64 numpy; fixed seeds give bit-identical histories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # "adam" | "adamw"
    weight_decay: float = 1e-2
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    early_stop_patience: int = 0  # epochs without val improvement; 0 disables

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - h * h


class Mlp:
    """Fully connected net with optional input-to-output residual skip.

    `out_transform="cholesky_orthonormalize"` centres the raw batch output
    and right-multiplies by the inverse Cholesky factor of its (optionally
    sample-weighted) Gram matrix, so Y^T diag(p) Y = I on every batch. The
    centring keeps all output directions orthogonal to the constant
    vector, which the trivial graph eigenvector would otherwise absorb.
    """

    def __init__(
        self,
        layer_dims,
        activation: str = "relu",
        residual: bool = False,
        out_transform: str = "none",
        seed: int = 0,
        zero_init_last: bool = False,
    ):
        if len(layer_dims) < 2:
            raise ConfigError("need at least input and output dims")
        if activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation '{activation}'")
        if out_transform not in ("none", "cholesky_orthonormalize"):
            raise ConfigError(f"unknown out_transform '{out_transform}'")
        if residual and layer_dims[0] != layer_dims[-1]:
            raise ConfigError("residual net needs input dim == output dim")
        self.layer_dims = list(layer_dims)
        self.activation = activation
        self.residual = residual
        self.out_transform = out_transform
        rng = np.random.default_rng(seed)
        gain = np.sqrt(2.0) if activation == "relu" else 1.0
        self.weights = []
        self.biases = []
        last = len(layer_dims) - 2
        for i, (fin, fout) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            w = rng.standard_normal((fin, fout)) * gain / np.sqrt(fin)
            if zero_init_last and i == last:
                w[:] = 0.0
            self.weights.append(w)
            self.biases.append(np.zeros(fout))

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_parameters(self, params) -> None:
        for i, (w, b) in enumerate(zip(params[::2], params[1::2])):
            self.weights[i][...] = w
            self.biases[i][...] = b

    def forward(self, x: np.ndarray, ortho_weights: np.ndarray | None = None) -> np.ndarray:
        return self.forward_cache(np.asarray(x, dtype=np.float64), ortho_weights)[0]

    def forward_raw(self, x: np.ndarray) -> np.ndarray:
        """Forward pass skipping the output transform."""
        return self._stack_forward(np.asarray(x, dtype=np.float64))[0]

    def _stack_forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.layer_dims[0]:
            raise ConfigError(
                f"batch width {x.shape[-1] if x.ndim == 2 else x.shape} "
                f"does not match input dim {self.layer_dims[0]}"
            )
        hs = [x]
        zs = []
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            zs.append(z)
            h = _act(self.activation, z) if i < n_layers - 1 else z
            hs.append(h)
        out = h + x if self.residual else h
        return out, hs, zs

    def forward_cache(self, x: np.ndarray, ortho_weights: np.ndarray | None = None):
        x = np.asarray(x, dtype=np.float64)
        out, hs, zs = self._stack_forward(x)
        ortho_cache = None
        if self.out_transform == "cholesky_orthonormalize":
            out, ortho_cache = cholesky_orthonormalize(out, ortho_weights)
        return out, (hs, zs, ortho_cache)

    def backward(self, cache, d_out: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(output).

        Returns (grads, d_input) with grads ordered as parameters().
        """
        hs, zs, ortho_cache = cache
        d = np.asarray(d_out, dtype=np.float64)
        if ortho_cache is not None:
            d = cholesky_orthonormalize_backward(d, ortho_cache)
        d_res = d if self.residual else None
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                d = d * _act_grad(self.activation, zs[i], hs[i + 1])
            grads_w[i] = hs[i].T @ d
            grads_b[i] = d.sum(axis=0)
            d = d @ self.weights[i].T
        if self.residual:
            d = d + d_res
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads.extend((gw, gb))
        return grads, d

    def save(self, path) -> None:
        meta = {
            "layer_dims": self.layer_dims,
            "activation": self.activation,
            "residual": self.residual,
            "out_transform": self.out_transform,
        }
        arrays = {f"w{i}": w for i, w in enumerate(self.weights)}
        arrays.update({f"b{i}": b for i, b in enumerate(self.biases)})
        np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "Mlp":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            net = cls(
                meta["layer_dims"],
                activation=meta["activation"],
                residual=meta["residual"],
                out_transform=meta["out_transform"],
            )
            for i in range(len(net.weights)):
                net.weights[i] = z[f"w{i}"].astype(np.float64)
                net.biases[i] = z[f"b{i}"].astype(np.float64)
        return net


def cholesky_orthonormalize(g: np.ndarray, weights: np.ndarray | None = None):
    """Centre and whiten the batch under sample weights p (uniform default).

    Output satisfies Y^T diag(p) Y = I and Y^T p = 0, i.e. orthonormality
    in the weighted inner product. With graph-degree weights this makes the
    outputs comparable to random-walk eigenvectors, which are orthonormal
    in exactly that geometry.
    """
    b = g.shape[0]
    if weights is None:
        p = np.full(b, 1.0 / b)
    else:
        p = np.asarray(weights, dtype=np.float64)
        p = p / p.sum()
    mu = p @ g
    gc = g - mu
    gram = gc.T @ (p[:, None] * gc)
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "singular batch Gram matrix: batch too small or collapsed outputs"
        ) from exc
    m = np.linalg.inv(chol).T  # upper triangular, Y = Gc @ m
    y = gc @ m
    return y, (gc, chol, m, p)


def cholesky_orthonormalize_backward(dy: np.ndarray, cache) -> np.ndarray:
    """Exact reverse-mode gradient through weighted centring + whitening."""
    gc, chol, m, p = cache
    d_gc = dy @ m.T
    d_m = gc.T @ dy
    d_chol = -m @ d_m.T @ m  # from m = inv(chol)^T
    mid = np.tril(chol.T @ d_chol)
    np.fill_diagonal(mid, 0.5 * np.diag(mid))
    d_gram = m @ mid @ m.T
    d_gram = 0.5 * (d_gram + d_gram.T)
    d_gc += p[:, None] * (gc @ (2.0 * d_gram))
    return d_gc - p[:, None] * d_gc.sum(axis=0)


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------


class Adam:
    """Adam / AdamW (decoupled decay, applied to weight matrices only)."""

    def __init__(self, params, lr, weight_decay=0.0, decoupled=False, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    @classmethod
    def from_config(cls, params, config: TrainConfig) -> "Adam":
        decoupled = config.optimizer == "adamw"
        return cls(
            params,
            lr=config.learning_rate,
            weight_decay=config.weight_decay if decoupled else 0.0,
            decoupled=decoupled,
        )

    def step(self, params, grads) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.decoupled and self.weight_decay and p.ndim == 2:
                p -= self.lr * self.weight_decay * p


def _check_finite(net: Mlp, epoch: int) -> None:
    for p in net.parameters():
        if not np.isfinite(p).all():
            raise NumericalError(f"non-finite parameter after epoch {epoch}")


# ---------------------------------------------------------------------------
# Squared MMD
# ---------------------------------------------------------------------------


@dataclass
class MmdKernel:
    """Mixture of RBF kernels.

    With `bandwidths` unset, each evaluation uses the median pairwise
    distance of the joined batch times `multipliers` (the median is treated
    as a constant for gradients, as usual for this heuristic).
    """

    bandwidths: tuple | None = None
    multipliers: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)

    def resolve(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.bandwidths is not None:
            return np.asarray(self.bandwidths, dtype=np.float64)
        joined = np.vstack([x, y])
        sq = _sqdist(joined, joined)
        med = np.sqrt(max(float(np.median(sq[np.triu_indices_from(sq, k=1)])), 1e-24))
        return med * np.asarray(self.multipliers, dtype=np.float64)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = np.sum(a**2, axis=1)[:, None] + np.sum(b**2, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(sq, 0.0)


def _kernel_sums(sqd: np.ndarray, sigmas: np.ndarray):
    k = np.zeros_like(sqd)
    w = np.zeros_like(sqd)  # sum_s exp(.)/sigma_s^2, for gradients
    for s in sigmas:
        e = np.exp(-sqd / (2.0 * s * s))
        k += e
        w += e / (s * s)
    return k, w


def mmd_sq(batch_x: np.ndarray, batch_y: np.ndarray, kernel: MmdKernel | None = None) -> float:
    """Biased squared-MMD V-statistic (diagonal terms included)."""
    x = np.asarray(batch_x, dtype=np.float64)
    y = np.asarray(batch_y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ConfigError(f"feature dims differ: {x.shape} vs {y.shape}")
    kernel = kernel or MmdKernel()
    sigmas = kernel.resolve(x, y)
    k_xx, _ = _kernel_sums(_sqdist(x, x), sigmas)
    k_xy, _ = _kernel_sums(_sqdist(x, y), sigmas)
    k_yy, _ = _kernel_sums(_sqdist(y, y), sigmas)
    return float(k_xx.mean() - 2.0 * k_xy.mean() + k_yy.mean())


def mmd_sq_grad(batch_x: np.ndarray, batch_y: np.ndarray, kernel: MmdKernel | None = None):
    """(value, d/dx, d/dy) of the squared MMD, bandwidths held fixed."""
    x = np.asarray(batch_x, dtype=np.float64)
    y = np.asarray(batch_y, dtype=np.float64)
    kernel = kernel or MmdKernel()
    sigmas = kernel.resolve(x, y)
    m1, m2 = x.shape[0], y.shape[0]
    k_xx, w_xx = _kernel_sums(_sqdist(x, x), sigmas)
    k_xy, w_xy = _kernel_sums(_sqdist(x, y), sigmas)
    k_yy, w_yy = _kernel_sums(_sqdist(y, y), sigmas)
    value = float(k_xx.mean() - 2.0 * k_xy.mean() + k_yy.mean())
    # d kappa(a, b) / d a = -w * (a - b); the xx/yy double sums hit each
    # index twice, the cross term once per side.
    dx = (2.0 / m1**2) * (w_xx @ x - w_xx.sum(axis=1)[:, None] * x)
    dx -= (2.0 / (m1 * m2)) * (w_xy @ y - w_xy.sum(axis=1)[:, None] * x)
    dy = (2.0 / m2**2) * (w_yy @ y - w_yy.sum(axis=1)[:, None] * y)
    dy -= (2.0 / (m1 * m2)) * (w_xy.T @ x - w_xy.sum(axis=0)[:, None] * y)
    return value, dx, dy


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


def write_history_csv(history, path) -> None:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r}" for r in history]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _split(n: int, frac: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = max(1, int(round(frac * n))) if n > 1 else 0
    return perm[n_val:], perm[:n_val]


def train_mmd_residual(
    net: Mlp,
    source: np.ndarray,
    target: np.ndarray,
    config: TrainConfig,
    kernel: MmdKernel | None = None,
):
    """Train the residual net so net(source) matches target in distribution.

    Source and target batches are drawn independently (no pairing). Returns
    (net, history) with the net restored to its best-validation parameters;
    the best validation MMD never exceeds the epoch-0 value because the
    initial parameters are a candidate.
    """
    if not net.residual:
        raise ConfigError("the distribution aligner must be a residual net")
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    kernel = kernel or MmdKernel()
    rng = np.random.default_rng(config.seed)
    src_tr, src_va = _split(source.shape[0], 0.1, rng)
    tgt_tr, tgt_va = _split(target.shape[0], 0.1, rng)
    val_kernel = MmdKernel(bandwidths=tuple(kernel.resolve(net.forward(source[src_va]), target[tgt_va])))

    def val_loss() -> float:
        return mmd_sq(net.forward(source[src_va]), target[tgt_va], val_kernel)

    opt = Adam.from_config(net.parameters(), config)
    best = [p.copy() for p in net.parameters()]
    best_val = val_loss()
    history = [EpochRecord(0, float("nan"), best_val)]
    since_best = 0
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        src_order = rng.permutation(src_tr)
        tgt_order = rng.permutation(tgt_tr)
        steps = max(1, min(len(src_order), len(tgt_order)) // bs)
        losses = []
        for s in range(steps):
            xb = source[src_order[s * bs : s * bs + bs]]
            yb = target[tgt_order[s * bs : s * bs + bs]]
            out, cache = net.forward_cache(xb)
            value, d_out, _ = mmd_sq_grad(out, yb, kernel)
            if not np.isfinite(value):
                raise NumericalError(f"NaN training loss at epoch {epoch}")
            grads, _ = net.backward(cache, d_out)
            opt.step(net.parameters(), grads)
            losses.append(value)
        _check_finite(net, epoch)
        vl = val_loss()
        history.append(EpochRecord(epoch, float(np.mean(losses)), vl))
        if vl < best_val:
            best_val = vl
            best = [p.copy() for p in net.parameters()]
            since_best = 0
        else:
            since_best += 1
            if config.early_stop_patience and since_best >= config.early_stop_patience:
                break
    net.set_parameters(best)
    return net, history


def spectralnet_loss_grad(net: Mlp, batch: np.ndarray, graph) -> tuple[float, list]:
    """Rayleigh loss tr(Y^T (D - W) Y)/sum(D) on one batch graph.

    Outputs are whitened in the degree-weighted inner product, so the loss
    is bounded below by the sum of the k smallest non-trivial random-walk
    Laplacian eigenvalues of the batch graph, with equality at the
    eigenvectors.
    """
    s = graph.degrees.sum()
    y, cache = net.forward_cache(batch, ortho_weights=graph.degrees)
    lap_y = graph.degrees[:, None] * y - graph.w @ y
    loss = float(np.sum(y * lap_y) / s)
    grads, _ = net.backward(cache, 2.0 * lap_y / s)
    return loss, grads


def train_spectralnet(
    net: Mlp,
    points: np.ndarray,
    config: TrainConfig,
    k_neighbors: int = 100,
    metric: str = "cosine",
    lr_plateau_patience: int = 10,
    lr_decay_factor: float = 0.1,
    min_lr: float = 1e-7,
    val_fraction: float = 0.1,
):
    """Minimise the Rayleigh-quotient loss with per-batch graph Laplacians.

    The learning rate decays when the train loss plateaus. A batch spanning
    the whole training split reuses one precomputed graph. With
    `val_fraction=0` all points are used for training and the final
    (fully converged) parameters are kept.
    """
    from .graph import build_affinity

    if net.out_transform != "cholesky_orthonormalize":
        raise ConfigError("spectral training requires the orthonormalising output layer")
    points = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    if val_fraction > 0:
        tr_idx, va_idx = _split(points.shape[0], val_fraction, rng)
        va_pts = points[va_idx]
        va_graph = build_affinity(va_pts, k=min(k_neighbors, len(va_idx) - 1), metric=metric)
    else:
        tr_idx, va_graph, va_pts = np.arange(points.shape[0]), None, None

    def val_loss() -> float:
        if va_graph is None:
            return float("nan")
        y = net.forward(va_pts, ortho_weights=va_graph.degrees)
        lap_y = va_graph.degrees[:, None] * y - va_graph.w @ y
        return float(np.sum(y * lap_y) / va_graph.degrees.sum())

    opt = Adam.from_config(net.parameters(), config)
    best = [p.copy() for p in net.parameters()]
    best_val = val_loss()
    history = [EpochRecord(0, float("nan"), best_val)]
    since_best = 0
    best_train = float("inf")
    since_plateau = 0
    bs = min(config.batch_size, len(tr_idx))
    full_graph = None
    if bs == len(tr_idx):
        full_graph = build_affinity(points[np.sort(tr_idx)], k=min(k_neighbors, bs - 1), metric=metric)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(tr_idx)
        losses = []
        for s in range(max(1, len(order) // bs)):
            sel = order[s * bs : s * bs + bs]
            if full_graph is not None:
                sel = np.sort(sel)
                batch, graph = points[sel], full_graph
            else:
                batch = points[sel]
                graph = build_affinity(batch, k=min(k_neighbors, batch.shape[0] - 1), metric=metric)
            loss, grads = spectralnet_loss_grad(net, batch, graph)
            if not np.isfinite(loss):
                raise NumericalError(f"NaN training loss at epoch {epoch}")
            opt.step(net.parameters(), grads)
            losses.append(loss)
        _check_finite(net, epoch)
        vl = val_loss()
        train_loss = float(np.mean(losses))
        history.append(EpochRecord(epoch, train_loss, vl))
        if train_loss < best_train - 1e-12:
            best_train = train_loss
            since_plateau = 0
        else:
            since_plateau += 1
            if lr_plateau_patience and since_plateau >= lr_plateau_patience:
                opt.lr *= lr_decay_factor
                since_plateau = 0
                if opt.lr < min_lr:
                    break
        if va_graph is not None:
            if vl < best_val:
                best_val = vl
                best = [p.copy() for p in net.parameters()]
                since_best = 0
            else:
                since_best += 1
                if config.early_stop_patience and since_best >= config.early_stop_patience:
                    break
    if va_graph is not None:
        net.set_parameters(best)
    return net, history


def contrastive_loss_grad(z_x: np.ndarray, z_y: np.ndarray, temperature: float):
    """Symmetric InfoNCE over the cosine-similarity matrix of m pairs."""
    m = z_x.shape[0]
    nx = np.linalg.norm(z_x, axis=1, keepdims=True)
    ny = np.linalg.norm(z_y, axis=1, keepdims=True)
    nx = np.maximum(nx, 1e-30)
    ny = np.maximum(ny, 1e-30)
    ux, uy = z_x / nx, z_y / ny
    logits = (ux @ uy.T) / temperature
    # row-wise and column-wise softmax cross-entropy against the diagonal
    def _ce(lg):
        lg = lg - lg.max(axis=1, keepdims=True)
        logz = np.log(np.exp(lg).sum(axis=1))
        return (logz - np.diag(lg)).mean(), np.exp(lg) / np.exp(lg).sum(axis=1, keepdims=True)

    loss_r, soft_r = _ce(logits)
    loss_c, soft_c = _ce(logits.T)
    loss = 0.5 * (loss_r + loss_c)
    eye = np.eye(m)
    d_logits = 0.5 * ((soft_r - eye) + (soft_c - eye).T) / m
    d_ux = (d_logits @ uy) / temperature
    d_uy = (d_logits.T @ ux) / temperature
    d_zx = (d_ux - ux * np.sum(d_ux * ux, axis=1, keepdims=True)) / nx
    d_zy = (d_uy - uy * np.sum(d_uy * uy, axis=1, keepdims=True)) / ny
    return float(loss), d_zx, d_zy


def train_contrastive(
    net_x: Mlp,
    net_y: Mlp,
    pairs_x: np.ndarray,
    pairs_y: np.ndarray,
    config: TrainConfig,
    temperature: float = 0.07,
):
    """Fit the paired baseline: both nets trained on the m known pairs."""
    pairs_x = np.asarray(pairs_x, dtype=np.float64)
    pairs_y = np.asarray(pairs_y, dtype=np.float64)
    m = pairs_x.shape[0]
    if m < 2 or pairs_y.shape[0] != m:
        raise ConfigError(f"need >= 2 row-paired samples, got {pairs_x.shape[0]}/{pairs_y.shape[0]}")
    rng = np.random.default_rng(config.seed)
    params = net_x.parameters() + net_y.parameters()
    opt = Adam.from_config(params, config)
    bs = min(config.batch_size, m)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(m)
        losses = []
        for s in range(max(1, m // bs)):
            sel = order[s * bs : s * bs + bs]
            if len(sel) < 2:
                continue
            zx, cx = net_x.forward_cache(pairs_x[sel])
            zy, cy = net_y.forward_cache(pairs_y[sel])
            loss, d_zx, d_zy = contrastive_loss_grad(zx, zy, temperature)
            if not np.isfinite(loss):
                raise NumericalError(f"NaN training loss at epoch {epoch}")
            gx, _ = net_x.backward(cx, d_zx)
            gy, _ = net_y.backward(cy, d_zy)
            opt.step(params, gx + gy)
            losses.append(loss)
        _check_finite(net_x, epoch)
        _check_finite(net_y, epoch)
        history.append(EpochRecord(epoch, float(np.mean(losses)), float("nan")))
    return net_x, net_y, history

"""(C+1)-way classifier over precomputed feature vectors: MLP encoder,
linear head, and a Linear-BatchNorm-ReLU-Linear projection trained with
cross-entropy plus a weighted supervised-contrastive term.

All math runs in float64 with hand-derived gradients; there is no autograd
anywhere in this package. Fake OOD samples carry label C (one extra class).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import read_tensor, write_tensor


class UndefinedSupConError(ValueError):
    """No anchor in the batch has a positive; the contrastive loss is undefined."""


@dataclass
class Affine:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1  # running-stat update rate; batch stats use 1/B variance


@dataclass
class ModelParams:
    encoder: list[Affine]  # each affine is followed by ReLU; empty = identity
    head: Affine  # feature_dim -> C+1
    proj1: Affine  # feature_dim -> feature_dim
    proj_bn: BatchNorm
    proj2: Affine  # feature_dim -> proj_dim
    num_classes: int  # C; the head emits C+1 logits

    @property
    def feature_dim(self) -> int:
        return self.head.weight.shape[1]


@dataclass
class TrainConfig:
    lam: float = 1.0
    tau: float = 0.1
    base_lr: float = 0.05
    warmup_epochs: int = 10
    warmup_start_lr: float = 0.01
    milestones: tuple[int, ...] = (100, 150)
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 512
    epochs: int = 200
    seed: int = 0
    encoder_dims: tuple[int, ...] = ()
    proj_dim: int = 128

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if any(a >= b for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")


@dataclass
class EpochLog:
    epoch: int
    lr: float
    ce: float
    supcon: float


def init_params(
    feature_dim: int,
    num_classes: int,
    encoder_dims: tuple[int, ...] = (),
    proj_dim: int = 128,
    seed: int = 0,
) -> ModelParams:
    """Seeded init: affine weights ~ uniform(+-1/sqrt(fan_in)), biases zero.

    Draw order is fixed (encoder layers, head, proj1, proj2) so a seed pins
    every parameter bit-exactly.
    """
    rng = np.random.default_rng(seed)

    def affine(n_in: int, n_out: int) -> Affine:
        bound = 1.0 / math.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        return Affine(weight=w, bias=np.zeros(n_out))

    encoder = []
    d = feature_dim
    for width in encoder_dims:
        encoder.append(affine(d, width))
        d = width
    head = affine(d, num_classes + 1)
    proj1 = affine(d, d)
    proj2 = affine(d, proj_dim)
    bn = BatchNorm(
        gamma=np.ones(d),
        beta=np.zeros(d),
        running_mean=np.zeros(d),
        running_var=np.ones(d),
    )
    return ModelParams(
        encoder=encoder,
        head=head,
        proj1=proj1,
        proj_bn=bn,
        proj2=proj2,
        num_classes=num_classes,
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    encoder_inputs: list[np.ndarray]
    encoder_pre: list[np.ndarray]
    feat: np.ndarray
    logits: np.ndarray
    a1: np.ndarray
    mu_b: np.ndarray
    var_b: np.ndarray
    xhat: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    z: np.ndarray


def encoder_forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Penultimate activations f(x); plain affine+ReLU stack, mode-free."""
    h = np.asarray(x, dtype=np.float64)
    for layer in params.encoder:
        h = np.maximum(h @ layer.weight.T + layer.bias, 0.0)
    return h


def head_logits(params: ModelParams, feat: np.ndarray) -> np.ndarray:
    return feat @ params.head.weight.T + params.head.bias


def forward(
    params: ModelParams, x: np.ndarray, training: bool = True
) -> ForwardCache:
    """Compute logits h(f(x)) and projection z = g(f(x)).

    Training mode normalizes with batch statistics (1/B variance) and
    updates the running statistics; eval mode uses the running statistics.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"batch must be 2-D, got shape {x.shape}")
    if x.shape[1] != (params.encoder[0].weight.shape[1] if params.encoder else params.feature_dim):
        raise ValueError(
            f"feature dim {x.shape[1]} does not match model input dim"
        )
    b = x.shape[0]
    if training and b < 2:
        raise ValueError("training-mode batch norm needs at least 2 samples")

    encoder_inputs = []
    encoder_pre = []
    h = x
    for layer in params.encoder:
        encoder_inputs.append(h)
        pre = h @ layer.weight.T + layer.bias
        encoder_pre.append(pre)
        h = np.maximum(pre, 0.0)
    feat = h

    logits = head_logits(params, feat)

    bn = params.proj_bn
    a1 = feat @ params.proj1.weight.T + params.proj1.bias
    if training:
        mu_b = a1.mean(axis=0)
        var_b = ((a1 - mu_b) ** 2).mean(axis=0)
        bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * mu_b
        bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * var_b
    else:
        mu_b = bn.running_mean
        var_b = bn.running_var
    xhat = (a1 - mu_b) / np.sqrt(var_b + bn.eps)
    a2 = bn.gamma * xhat + bn.beta
    a3 = np.maximum(a2, 0.0)
    z = a3 @ params.proj2.weight.T + params.proj2.bias

    return ForwardCache(
        x=x,
        encoder_inputs=encoder_inputs,
        encoder_pre=encoder_pre,
        feat=feat,
        logits=logits,
        a1=a1,
        mu_b=mu_b,
        var_b=var_b,
        xhat=xhat,
        a2=a2,
        a3=a3,
        z=z,
    )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log softmax probability of the true label."""
    logp = _log_softmax(np.asarray(logits, dtype=np.float64))
    return float(-logp[np.arange(len(labels)), labels].mean())


def _supcon_parts(z: np.ndarray, labels: np.ndarray, tau: float):
    """Shared setup: unit rows, pairwise cosine similarities, masks."""
    z = np.asarray(z, dtype=np.float64)
    b = z.shape[0]
    if b < 2:
        raise ValueError("supervised contrastive loss needs a batch of >= 2")
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        # a sample whose projection activations all died leaves cosine
        # similarity undefined; callers fall back to the CE term alone
        raise UndefinedSupConError("zero-norm projection vector in batch")
    zhat = z / norms[:, None]
    sims = zhat @ zhat.T
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(b, dtype=bool)
    positives = same & off_diag
    return zhat, norms, sims, positives, off_diag


def _supcon_loss_and_grad(z: np.ndarray, labels: np.ndarray, tau: float):
    """Returns (loss, dloss/dz, number of anchors with a positive)."""
    zhat, norms, sims, positives, off_diag = _supcon_parts(z, labels, tau)
    b = sims.shape[0]
    n_pos = positives.sum(axis=1)
    anchors = n_pos > 0
    n_anchors = int(anchors.sum())
    if n_anchors == 0:
        return 0.0, np.zeros_like(zhat), 0

    logits = sims / tau
    neg_inf = np.full_like(logits, -np.inf)
    masked = np.where(off_diag, logits, neg_inf)
    row_max = masked.max(axis=1, keepdims=True)
    expd = np.exp(masked - row_max)
    denom = expd.sum(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(denom[:, 0])
    softmax = expd / denom  # q_ia over a != i; zero on the diagonal

    per_anchor = np.zeros(b)
    per_anchor[anchors] = (
        np.where(positives, logits, 0.0).sum(axis=1)[anchors] / n_pos[anchors]
        - lse[anchors]
    )
    loss = float(-per_anchor[anchors].mean())

    # dL/dS_ia for each anchor row i, zero rows for skipped anchors
    grad_s = np.zeros((b, b))
    pos_weight = np.zeros((b, b))
    pos_weight[anchors] = positives[anchors] / n_pos[anchors, None]
    grad_s[anchors] = (softmax[anchors] - pos_weight[anchors]) / (n_anchors * tau)

    dzhat = (grad_s + grad_s.T) @ zhat
    # through row normalization: project out the radial component
    radial = (dzhat * zhat).sum(axis=1, keepdims=True)
    dz = (dzhat - radial * zhat) / norms[:, None]
    return loss, dz, n_anchors


def loss_supcon(z: np.ndarray, labels: np.ndarray, tau: float) -> float:
    """Supervised contrastive loss over cosine similarities at temperature tau.

    The denominator for anchor i ranges over every other batch index; the
    numerator averages over the other samples sharing i's label. Anchors with
    no positive are skipped and the leading mean divides by the anchors kept.
    """
    loss, _, n_anchors = _supcon_loss_and_grad(z, labels, tau)
    if n_anchors == 0:
        raise UndefinedSupConError("no anchor in the batch has a positive")
    return loss


@dataclass
class Grads:
    encoder: list[Affine]
    head: Affine
    proj1: Affine
    proj_bn_gamma: np.ndarray
    proj_bn_beta: np.ndarray
    proj2: Affine


def backward(
    params: ModelParams,
    x: np.ndarray,
    labels: np.ndarray,
    lam: float,
    tau: float,
) -> tuple[Grads, float, float]:
    """Analytic gradients of L_CE + lam * L_SC for every parameter.

    Returns (grads, ce value, supcon value). The batch-norm gradient follows
    the batch-statistics path (mean and variance both depend on the batch).
    Raises UndefinedSupConError when lam > 0 and no anchor has a positive.
    """
    cache = forward(params, x, training=True)
    b = x.shape[0]
    labels = np.asarray(labels)

    # cross-entropy path
    logp = _log_softmax(cache.logits)
    probs = np.exp(logp)
    ce = float(-logp[np.arange(b), labels].mean())
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    d_head = Affine(weight=dlogits.T @ cache.feat, bias=dlogits.sum(axis=0))
    dfeat = dlogits @ params.head.weight

    # contrastive path through the projection
    bn = params.proj_bn
    if lam > 0.0:
        sc, dz, n_anchors = _supcon_loss_and_grad(cache.z, labels, tau)
        if n_anchors == 0:
            raise UndefinedSupConError("no anchor in the batch has a positive")
        dz = lam * dz
        d_proj2 = Affine(weight=dz.T @ cache.a3, bias=dz.sum(axis=0))
        da3 = dz @ params.proj2.weight
        da2 = da3 * (cache.a2 > 0.0)
        d_gamma = (da2 * cache.xhat).sum(axis=0)
        d_beta = da2.sum(axis=0)
        dxhat = da2 * bn.gamma
        xc = cache.a1 - cache.mu_b
        invstd = 1.0 / np.sqrt(cache.var_b + bn.eps)
        dvar = (dxhat * xc).sum(axis=0) * -0.5 * invstd**3
        dmu = -(dxhat.sum(axis=0)) * invstd + dvar * (-2.0 * xc.mean(axis=0))
        da1 = dxhat * invstd + dvar * 2.0 * xc / b + dmu / b
        d_proj1 = Affine(weight=da1.T @ cache.feat, bias=da1.sum(axis=0))
        dfeat = dfeat + da1 @ params.proj1.weight
    else:
        sc = 0.0
        d_proj1 = Affine(
            weight=np.zeros_like(params.proj1.weight),
            bias=np.zeros_like(params.proj1.bias),
        )
        d_proj2 = Affine(
            weight=np.zeros_like(params.proj2.weight),
            bias=np.zeros_like(params.proj2.bias),
        )
        d_gamma = np.zeros_like(bn.gamma)
        d_beta = np.zeros_like(bn.beta)

    # encoder path
    d_encoder = []
    grad = dfeat
    for layer, inp, pre in zip(
        reversed(params.encoder),
        reversed(cache.encoder_inputs),
        reversed(cache.encoder_pre),
    ):
        dpre = grad * (pre > 0.0)
        d_encoder.append(Affine(weight=dpre.T @ inp, bias=dpre.sum(axis=0)))
        grad = dpre @ layer.weight
    d_encoder.reverse()

    grads = Grads(
        encoder=d_encoder,
        head=d_head,
        proj1=d_proj1,
        proj_bn_gamma=d_gamma,
        proj_bn_beta=d_beta,
        proj2=d_proj2,
    )
    return grads, ce, sc


def total_loss(
    params: ModelParams, x: np.ndarray, labels: np.ndarray, lam: float, tau: float
) -> float:
    """L_CE + lam * L_SC from a training-mode forward pass (finite-difference target)."""
    cache = forward(params, x, training=True)
    total = loss_ce(cache.logits, labels)
    if lam > 0.0:
        sc, _, n_anchors = _supcon_loss_and_grad(cache.z, labels, tau)
        if n_anchors == 0:
            raise UndefinedSupConError("no anchor in the batch has a positive")
        total += lam * sc
    return total


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Linear warmup (only for batches over 256), then step decay at milestones."""
    if (
        config.batch_size > 256
        and config.warmup_epochs > 0
        and epoch < config.warmup_epochs
    ):
        lr = config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * (
            epoch / config.warmup_epochs
        )
    else:
        lr = config.base_lr
    drops = sum(1 for m in config.milestones if epoch >= m)
    return lr / (config.decay_factor**drops)


@dataclass
class SgdState:
    velocity: Grads


def init_sgd_state(params: ModelParams) -> SgdState:
    zero = lambda a: np.zeros_like(a)
    return SgdState(
        velocity=Grads(
            encoder=[Affine(zero(l.weight), zero(l.bias)) for l in params.encoder],
            head=Affine(zero(params.head.weight), zero(params.head.bias)),
            proj1=Affine(zero(params.proj1.weight), zero(params.proj1.bias)),
            proj_bn_gamma=zero(params.proj_bn.gamma),
            proj_bn_beta=zero(params.proj_bn.beta),
            proj2=Affine(zero(params.proj2.weight), zero(params.proj2.bias)),
        )
    )


def sgd_step(
    params: ModelParams,
    grads: Grads,
    state: SgdState,
    config: TrainConfig,
    epoch: int,
) -> ModelParams:
    """Momentum SGD update in place: v <- m*v + (g + wd*p); p <- p - lr*v.

    Weight decay touches affine weights only, never biases or the batch-norm
    scale/shift.
    """
    lr = learning_rate(config, epoch)
    mom, wd = config.momentum, config.weight_decay

    def upd(p: np.ndarray, g: np.ndarray, v: np.ndarray, decay: bool) -> None:
        g_eff = g + wd * p if decay else g
        v *= mom
        v += g_eff
        p -= lr * v

    for layer, g, v in zip(params.encoder, grads.encoder, state.velocity.encoder):
        upd(layer.weight, g.weight, v.weight, True)
        upd(layer.bias, g.bias, v.bias, False)
    upd(params.head.weight, grads.head.weight, state.velocity.head.weight, True)
    upd(params.head.bias, grads.head.bias, state.velocity.head.bias, False)
    upd(params.proj1.weight, grads.proj1.weight, state.velocity.proj1.weight, True)
    upd(params.proj1.bias, grads.proj1.bias, state.velocity.proj1.bias, False)
    upd(params.proj_bn.gamma, grads.proj_bn_gamma, state.velocity.proj_bn_gamma, False)
    upd(params.proj_bn.beta, grads.proj_bn_beta, state.velocity.proj_bn_beta, False)
    upd(params.proj2.weight, grads.proj2.weight, state.velocity.proj2.weight, True)
    upd(params.proj2.bias, grads.proj2.bias, state.velocity.proj2.bias, False)
    return params


def train(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    config: TrainConfig,
) -> tuple[ModelParams, list[EpochLog]]:
    """Deterministic training loop over ID features plus label-C fakes.

    A fixed seed pins the parameter init and every epoch's shuffle, so two
    runs with the same inputs produce bit-identical parameters. Batches where
    the contrastive loss is undefined fall back to the CE term alone for that
    step. Trailing batches of one sample are dropped (batch norm needs two).
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > num_classes:
        raise ValueError("labels must lie in [0, C] with C the fake-OOD class")
    n = features.shape[0]
    rng = np.random.default_rng(config.seed)
    params = init_params(
        feature_dim=features.shape[1],
        num_classes=num_classes,
        encoder_dims=config.encoder_dims,
        proj_dim=config.proj_dim,
        seed=config.seed,
    )
    state = init_sgd_state(params)
    logs = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        ce_sum = sc_sum = 0.0
        count = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            xb, yb = features[idx], labels[idx]
            try:
                grads, ce, sc = backward(params, xb, yb, config.lam, config.tau)
            except UndefinedSupConError:
                grads, ce, sc = backward(params, xb, yb, 0.0, config.tau)
            sgd_step(params, grads, state, config, epoch)
            ce_sum += ce * len(idx)
            sc_sum += sc * len(idx)
            count += len(idx)
        logs.append(
            EpochLog(
                epoch=epoch,
                lr=learning_rate(config, epoch),
                ce=ce_sum / max(count, 1),
                supcon=sc_sum / max(count, 1),
            )
        )
    return params, logs


def write_training_log(logs: list[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "ce", "supcon"])
        for log in logs:
            writer.writerow([log.epoch, repr(log.lr), repr(log.ce), repr(log.supcon)])


def _param_items(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    items = []
    for i, layer in enumerate(params.encoder):
        items.append((f"encoder.{i}.weight", layer.weight))
        items.append((f"encoder.{i}.bias", layer.bias))
    items += [
        ("head.weight", params.head.weight),
        ("head.bias", params.head.bias),
        ("proj1.weight", params.proj1.weight),
        ("proj1.bias", params.proj1.bias),
        ("proj_bn.gamma", params.proj_bn.gamma),
        ("proj_bn.beta", params.proj_bn.beta),
        ("proj_bn.running_mean", params.proj_bn.running_mean),
        ("proj_bn.running_var", params.proj_bn.running_var),
        ("proj2.weight", params.proj2.weight),
        ("proj2.bias", params.proj2.bias),
    ]
    return items


def layout_path(params_path: str | Path) -> Path:
    return Path(params_path).with_suffix(".layout.json")


def save_params(params: ModelParams, path: str | Path) -> None:
    """One flat f32 FODF tensor plus a JSON sidecar describing the layout."""
    items = _param_items(params)
    flat = np.concatenate([a.reshape(-1) for _, a in items]).astype(np.float32)
    write_tensor(flat, path)
    layout = {
        "num_classes": params.num_classes,
        "num_encoder_layers": len(params.encoder),
        "bn_eps": params.proj_bn.eps,
        "bn_momentum": params.proj_bn.momentum,
        "tensors": [],
    }
    offset = 0
    for name, a in items:
        layout["tensors"].append(
            {"name": name, "dims": list(a.shape), "offset": offset}
        )
        offset += a.size
    with open(layout_path(path), "w") as f:
        json.dump(layout, f, indent=2)
        f.write("\n")


def load_params(path: str | Path) -> ModelParams:
    flat = read_tensor(path).astype(np.float64)
    layout = json.loads(layout_path(path).read_text())
    tensors = {}
    for entry in layout["tensors"]:
        dims = tuple(entry["dims"])
        size = int(np.prod(dims))
        start = entry["offset"]
        tensors[entry["name"]] = flat[start : start + size].reshape(dims)
    encoder = [
        Affine(tensors[f"encoder.{i}.weight"], tensors[f"encoder.{i}.bias"])
        for i in range(layout["num_encoder_layers"])
    ]
    bn = BatchNorm(
        gamma=tensors["proj_bn.gamma"],
        beta=tensors["proj_bn.beta"],
        running_mean=tensors["proj_bn.running_mean"],
        running_var=tensors["proj_bn.running_var"],
        eps=layout["bn_eps"],
        momentum=layout["bn_momentum"],
    )
    return ModelParams(
        encoder=encoder,
        head=Affine(tensors["head.weight"], tensors["head.bias"]),
        proj1=Affine(tensors["proj1.weight"], tensors["proj1.bias"]),
        proj_bn=bn,
        proj2=Affine(tensors["proj2.weight"], tensors["proj2.bias"]),
        num_classes=layout["num_classes"],
    )

"""Gradient verification, the synthetic bar-orientation task, plain SGD,
and gradient-based receptive-field maps.

All gradients in this package are hand-derived adjoints; fd_check compares
them against central finite differences of the very same forward code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from . import ops
from .fusion import FusionKernel
from .ssm import SsmParams, init_ssm_params, ssm_layer_backward, ssm_layer_forward
from .tensor import NumericError, flatten_scan_order


@dataclass
class GradRecord:
    """Gradients mirroring the tracked quantities of one backward pass."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    wrt_input: np.ndarray | None = None


def fd_check(f, point: np.ndarray, analytic: np.ndarray, eps: float = 1e-5,
             coords=None) -> float:
    """Max over coordinates of |analytic - central_fd| / max(1, |fd|).

    f is a scalar function of one array; coords optionally restricts the
    sweep to a subset of flat indices (useful for large parameter tensors).
    """
    point = np.asarray(point, dtype=np.float64)
    flat = point.reshape(-1)
    grad_flat = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if grad_flat.shape != flat.shape:
        raise ValueError("analytic gradient shape does not match the point")
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for idx in coords:
        saved = flat[idx]
        flat[idx] = saved + eps
        f_plus = f(point)
        flat[idx] = saved - eps
        f_minus = f(point)
        flat[idx] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("non-finite forward value during fd sweep")
        fd = (f_plus - f_minus) / (2.0 * eps)
        err = abs(grad_flat[idx] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


# ------------------------------------------------------------- toy dataset

@dataclass
class ToyDataset:
    """Balanced horizontal-vs-vertical bar images with additive noise.

    images: [n, H, W, 3]; labels: [n] in {0 = horizontal, 1 = vertical}.
    """

    images: np.ndarray
    labels: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.labels)


def make_bar_dataset(n: int = 256, hw=(16, 16), noise: float = 0.1, seed: int = 0,
                     brightness_shift: float = 0.0) -> ToyDataset:
    """Half the images carry a full-width horizontal bar at a random row,
    half a vertical bar at a random column; bar value 1 on a 0 background.

    brightness_shift adds a constant to every class-1 image, which makes the
    classes linearly separable in pixel space (the plain bar task is not:
    any linear functional has equal means over the two classes).
    """
    if n % 2:
        raise ValueError("dataset size must be even to balance the classes")
    rng = np.random.default_rng(seed)
    height, width = hw
    images = rng.normal(0.0, noise, size=(n, height, width, 3))
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2 :] = 1
    for i in range(n):
        if labels[i] == 0:
            images[i, rng.integers(height), :, :] += 1.0
        else:
            images[i, :, rng.integers(width), :] += 1.0 + brightness_shift
    order = rng.permutation(n)
    return ToyDataset(images=images[order], labels=labels[order], seed=seed)


# ------------------------------------------------------------ training loop

@dataclass
class TrainResult:
    losses: np.ndarray            # per-step mean minibatch cross-entropy
    initial_loss: float           # full-dataset CE before the first step
    final_loss: float             # full-dataset CE after the last step
    accuracy: float               # full-dataset argmax accuracy after training
    weights: dict


def dataset_loss(cfg: model_mod.ModelConfig, weights: dict, ds: ToyDataset) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) over the whole dataset, inference mode."""
    total = 0.0
    hits = 0
    for img, label in zip(ds.images, ds.labels):
        logits = model_mod.model_forward(img, cfg, weights, training=False)
        loss, _ = ops.softmax_xent_fwd(logits, int(label))
        total += loss
        hits += int(np.argmax(logits) == label)
    return total / len(ds), hits / len(ds)


def train_toy(cfg: model_mod.ModelConfig, ds: ToyDataset, steps: int = 500,
              lr: float = 0.01, batch_size: int = 8, seed: int = 0,
              weights: dict | None = None) -> TrainResult:
    """Plain minibatch SGD on softmax cross-entropy; deterministic per seed."""
    if weights is None:
        weights = model_mod.init_weights(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    batch_size = min(batch_size, len(ds))
    trainable = model_mod.trainable_names(weights)

    initial_loss, _ = dataset_loss(cfg, weights, ds)
    losses = np.empty(steps)
    order = rng.permutation(len(ds))
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > len(ds):
            order = rng.permutation(len(ds))
            cursor = 0
        batch = order[cursor : cursor + batch_size]
        cursor += batch_size

        grads = {name: np.zeros_like(weights[name]) for name in trainable}
        batch_loss = 0.0
        for i in batch:
            logits, cache = model_mod.model_fwd(ds.images[i], cfg, weights, training=True)
            loss, loss_cache = ops.softmax_xent_fwd(logits, int(ds.labels[i]))
            batch_loss += loss
            g_logits = ops.softmax_xent_bwd(loss_cache, 1.0 / batch_size)
            _, sample_grads = model_mod.model_bwd(cache, g_logits)
            for name in trainable:
                grads[name] += sample_grads[name]
        losses[step] = batch_loss / batch_size
        if not np.isfinite(losses[step]):
            raise NumericError(f"training diverged at step {step}")
        for name in trainable:
            weights[name] = weights[name] - lr * grads[name]

    final_loss, accuracy = dataset_loss(cfg, weights, ds)
    return TrainResult(
        losses=losses,
        initial_loss=initial_loss,
        final_loss=final_loss,
        accuracy=accuracy,
        weights=weights,
    )


def write_loss_csv(path, losses: np.ndarray) -> None:
    """Rows of `step,loss`, no header."""
    with open(path, "w", newline="\n") as fh:
        for step, loss in enumerate(losses):
            fh.write(f"{step},{float(loss)!r}\n")


# ------------------------------------------------- receptive-field mapping

@dataclass
class ScanImageLayer:
    """Pixel embedding followed by one scan/fusion/observe layer at image
    resolution; the probe used for receptive-field and state visualization.

    kernel None disables the fusion stage entirely (plain causal scan).
    """

    w_embed: np.ndarray            # [3, C]
    params: SsmParams
    kernel: FusionKernel | None


def make_scan_image_layer(channels: int = 8, n_state: int = 1, kernel: FusionKernel | None = None,
                          seed: int = 0) -> ScanImageLayer:
    rng = np.random.default_rng(seed)
    return ScanImageLayer(
        w_embed=rng.normal(0.0, 0.5, size=(3, channels)),
        params=init_ssm_params(channels, n_state, rng=rng),
        kernel=kernel,
    )


def erf_map(layer: ScanImageLayer, img: np.ndarray, center: tuple[int, int] | None = None) -> np.ndarray:
    """Contribution of every input pixel to the layer output at `center`:
    the absolute input gradient summed over image channels, shape [H, W].

    The probed scalar is the channel-sum of the layer output at the center
    position. Without fusion the scan is causal, so the map is exactly zero
    at every position after the center in scan order.
    """
    height, width, _ = img.shape
    if center is None:
        center = (height // 2, width // 2)
    t_center = center[0] * width + center[1]
    u = flatten_scan_order(img) @ layer.w_embed
    y, cache = ssm_layer_forward(u, layer.params, layer.kernel, (height, width))
    g_y = np.zeros_like(y)
    g_y[t_center, :] = 1.0
    g_u, _ = ssm_layer_backward(cache, g_y)
    g_img = g_u @ layer.w_embed.T
    return np.abs(g_img).sum(axis=1).reshape(height, width)


def state_maps(layer: ScanImageLayer, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lane-mean state magnitude before and after fusion, both [H, W].

    With an identity kernel (or kernel None) the two maps are identical.
    """
    from .fusion import sasf_apply
    from .ssm import discretize, scan_states
    from .tensor import unflatten_scan_order

    height, width, _ = img.shape
    u = flatten_scan_order(img) @ layer.w_embed
    seq = discretize(u, layer.params)
    x = scan_states(seq)
    lanes = x.reshape(u.shape[0], -1)
    x_grid = unflatten_scan_order(lanes, height, width)
    if layer.kernel is not None:
        h_grid = sasf_apply(x_grid, layer.kernel.repeat_lanes(layer.params.n_state))
    else:
        h_grid = x_grid
    return x_grid.mean(axis=2), h_grid.mean(axis=2)

"""Shared test fixtures: finite-difference gradient checks and toy nets."""

from __future__ import annotations

import numpy as np

from endofeat import losses, network
from endofeat import tensor as T
from endofeat.data import PseudoLabel, warp_label
from endofeat.homography import (
    HomographyConfig,
    correspondence_tensor,
    sample_homography,
    to_pixel_frame,
    warp_image,
)
from endofeat.network import Architecture
from endofeat.tensor import Tensor


def rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def check_gradients(build, arrays, eps: float = 1e-6, tol: float = 1e-4) -> float:
    """Compare tape gradients of build(*tensors) against central differences.

    build must map Tensors (one per array) to a scalar Tensor. Gradients
    are compared per element with the scaled error
    |analytic - fd| / max(1, |analytic|, |fd|); asserts the worst one is
    below tol and returns it.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a) for a in arrays]
    with T.GradTape() as tape:
        loss = build(*tensors)
    grads = T.backward(tape, loss)
    analytic = [np.array(grads.get(t)) for t in tensors]

    worst = 0.0
    for ai, arr in enumerate(arrays):
        flat = arr.ravel()
        an_flat = analytic[ai].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = build(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig - eps
            lo = build(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            err = abs(an_flat[i] - fd) / max(1.0, abs(an_flat[i]), abs(fd))
            worst = max(worst, err)
    assert worst < tol, f"gradient mismatch: scaled error {worst:.3e} >= {tol}"
    return worst


def op_cases():
    """(name, build, arrays) triples covering every differentiable op."""
    r = rng(7)
    cases = []

    x34 = r.uniform(-1.0, 1.0, (3, 4))
    y34 = r.uniform(-1.0, 1.0, (3, 4))
    w34 = r.uniform(-1.0, 1.0, (3, 4))
    w43 = r.uniform(-1.0, 1.0, (4, 3))
    w26 = r.uniform(-1.0, 1.0, (2, 6))
    cases.append(("add", lambda a, b: T.reduce_sum(T.mul(T.add(a, b), Tensor(w34))), [x34, y34]))
    cases.append(("sub", lambda a, b: T.reduce_sum(T.mul(T.sub(a, b), Tensor(w34))), [x34, y34]))
    cases.append(("mul", lambda a, b: T.reduce_sum(T.mul(T.mul(a, b), Tensor(w34))), [x34, y34]))
    cases.append(
        ("affine", lambda a: T.reduce_sum(T.mul(T.affine(a, -0.7, 0.3), Tensor(w34))), [x34])
    )
    cases.append(("reduce_sum", lambda a: T.reduce_sum(a), [x34]))
    cases.append(("reduce_mean", lambda a: T.reduce_mean(a), [x34]))

    relu_in = r.uniform(0.05, 1.0, (3, 4)) * r.choice([-1.0, 1.0], (3, 4))  # keep off the kink
    cases.append(("relu", lambda a: T.reduce_sum(T.mul(T.relu(a), Tensor(w34))), [relu_in]))

    a34 = r.uniform(-1.0, 1.0, (3, 4))
    b42 = r.uniform(-1.0, 1.0, (4, 2))
    w32 = r.uniform(-1.0, 1.0, (3, 2))
    cases.append(
        ("matmul", lambda a, b: T.reduce_sum(T.mul(T.matmul(a, b), Tensor(w32))), [a34, b42])
    )
    cases.append(
        ("transpose2d", lambda a: T.reduce_sum(T.mul(T.transpose2d(a), Tensor(w43))), [x34])
    )
    cases.append(
        ("reshape", lambda a: T.reduce_sum(T.mul(T.reshape(a, (2, 6)), Tensor(w26))), [x34])
    )

    x235 = r.uniform(-1.0, 1.0, (2, 3, 5))
    w233 = r.uniform(-1.0, 1.0, (2, 3, 3))
    cases.append(
        (
            "slice_channels",
            lambda a: T.reduce_sum(T.mul(T.slice_channels(a, 1, 4), Tensor(w233))),
            [x235],
        )
    )

    x562 = r.uniform(-1.0, 1.0, (5, 6, 2))
    k3323 = r.uniform(-1.0, 1.0, (3, 3, 2, 3))
    b3 = r.uniform(-1.0, 1.0, 3)
    w563 = r.uniform(-1.0, 1.0, (5, 6, 3))
    cases.append(
        (
            "conv2d",
            lambda x, k, b: T.reduce_sum(T.mul(T.conv2d(x, k, b, 1, 1), Tensor(w563))),
            [x562, k3323, b3],
        )
    )
    x772 = r.uniform(-1.0, 1.0, (7, 7, 2))
    k3322 = r.uniform(-1.0, 1.0, (3, 3, 2, 2))
    b2 = r.uniform(-1.0, 1.0, 2)
    w332 = r.uniform(-1.0, 1.0, (3, 3, 2))
    cases.append(
        (
            "conv2d_stride2",
            lambda x, k, b: T.reduce_sum(T.mul(T.conv2d(x, k, b, 2, 0), Tensor(w332))),
            [x772, k3322, b2],
        )
    )

    x462 = r.uniform(-1.0, 1.0, (4, 6, 2))
    w232 = r.uniform(-1.0, 1.0, (2, 3, 2))
    cases.append(
        ("max_pool2x2", lambda a: T.reduce_sum(T.mul(T.max_pool2x2(a), Tensor(w232))), [x462])
    )

    x2265 = r.uniform(-1.0, 1.0, (2, 2, 65))
    w2265 = r.uniform(-1.0, 1.0, (2, 2, 65))
    cases.append(
        (
            "channel_softmax",
            lambda a: T.reduce_sum(T.mul(T.channel_softmax(a), Tensor(w2265))),
            [x2265],
        )
    )

    x2364 = r.uniform(-1.0, 1.0, (2, 3, 64))
    w1624 = r.uniform(-1.0, 1.0, (16, 24))
    cases.append(
        (
            "depth_to_space",
            lambda a: T.reduce_sum(T.mul(T.depth_to_space(a), Tensor(w1624))),
            [x2364],
        )
    )

    x342 = r.uniform(-1.0, 1.0, (3, 4, 2))
    w682 = r.uniform(-1.0, 1.0, (6, 8, 2))
    cases.append(
        (
            "bicubic_upsample",
            lambda a: T.reduce_sum(T.mul(T.bicubic_upsample(a, 2), Tensor(w682))),
            [x342],
        )
    )

    x35 = r.uniform(0.3, 1.0, (3, 5)) * r.choice([-1.0, 1.0], (3, 5))  # norms clear the guard
    w35 = r.uniform(-1.0, 1.0, (3, 5))
    cases.append(
        ("l2_normalize", lambda a: T.reduce_sum(T.mul(T.l2_normalize(a), Tensor(w35))), [x35])
    )

    logits = r.uniform(-1.0, 1.0, (5, 7))
    targets = r.integers(0, 7, 5)
    cases.append(
        ("softmax_cross_entropy", lambda a: T.softmax_cross_entropy(a, targets), [logits])
    )
    return cases


def toy_architecture() -> Architecture:
    return Architecture(
        encoder_stages=((2, 2), (2, 2), (2, 2), (2, 2)), head_width=3, descriptor_dim=2
    )


def toy_pair_loss_case(size: int = 16, seed: int = 3):
    """(build, arrays) for the full warped-pair loss on a toy net.

    arrays are every kernel and bias; build reassembles them into params
    and evaluates the combined detection + descriptor + highlight loss on
    a fixed image pair related by a known warp.
    """
    arch = toy_architecture()
    params = network.init_params(arch, seed=seed, dtype=np.float64)
    names = [name for name, *_ in arch.layer_plan()]
    r = rng((seed, 1))
    arrays = []
    for name in names:
        kernel, bias = params.weights[name]
        arrays.append(np.array(kernel.data))
        # Random nonzero biases keep every unit clear of the relu kink,
        # where a one-sided subgradient cannot match central differences.
        shape = bias.data.shape
        arrays.append(r.uniform(0.02, 0.2, shape) * r.choice([-1.0, 1.0], shape))
    img_a = r.uniform(0.05, 0.65, (size, size))
    img_a[3:6, 4:7] = 0.92  # saturated patch keeps the highlight term active
    h_unit = sample_homography(
        rng((seed, 2)),
        HomographyConfig(
            perspective=0.02, scale_min=0.9, scale_max=1.1, rotation_deg=10.0, translation=0.05
        ),
    )
    h_px = to_pixel_frame(h_unit, size, size)
    img_b = warp_image(img_a, h_px)

    flat = r.choice(size * size, size=6, replace=False)
    ys, xs = np.divmod(flat, size)
    label_a = PseudoLabel(np.stack([xs, ys], axis=1), r.uniform(0.4, 1.0, 6))
    label_b = warp_label(label_a, h_px, size, size)
    corr = correspondence_tensor(h_px, size, size)
    loss_config = losses.LossConfig()

    def build(*tensors):
        weights = {name: (tensors[2 * i], tensors[2 * i + 1]) for i, name in enumerate(names)}
        p = network.NetworkParams(arch, weights)
        heads_a = network.forward(p, Tensor(img_a))
        heads_b = network.forward(p, Tensor(img_b))
        return losses.specular_pair_loss(
            img_a, heads_a, label_a, img_b, heads_b, label_b, corr, loss_config
        )

    return build, arrays

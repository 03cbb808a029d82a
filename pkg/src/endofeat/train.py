"""Homographic self-supervised fine-tuning loop.

Each iteration draws a batch of frames, warps every frame by a freshly
sampled homography, runs the network on both views, and minimizes the
combined pair loss (with highlight suppression when the specularity
weight is nonzero) with Adam. All randomness derives from the run seed
keyed by (seed, iteration, slot), so runs are bit-reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import losses, network
from .data import PseudoLabel, warp_label
from .homography import HomographyConfig, correspondence_tensor, sample_homography, to_pixel_frame, warp_image
from .ioutil import atomic_write_text, fmt
from .network import NetworkParams
from .tensor import GradTape, Tensor, backward
from . import tensor as T


class TrainingDivergedError(Exception):
    """Loss became non-finite; .iteration holds the failing step."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 100
    learning_rate: float = 1e-5
    batch_size: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    homography: HomographyConfig = field(default_factory=HomographyConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class TrainingSample:
    image: np.ndarray  # H x W grayscale in [0, 1]
    label: PseudoLabel


@dataclass
class IterationStats:
    iteration: int
    total: float
    detection: float
    descriptor: float
    specularity: float


class AdamState:
    """First/second moment accumulators per parameter label."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: NetworkParams, grads: dict, state: AdamState, config: TrainConfig) -> NetworkParams:
    """One Adam update; returns fresh params, mutates state."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    new_weights = {}
    for name, (kernel, bias) in params.weights.items():
        updated = []
        for suffix, tensor in (("kernel", kernel), ("bias", bias)):
            label = f"{name}.{suffix}"
            g = grads[label]
            m = state.m.get(label)
            if m is None:
                m = np.zeros_like(tensor.data)
                v = np.zeros_like(tensor.data)
            else:
                v = state.v[label]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            state.m[label] = m
            state.v[label] = v
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            step = config.learning_rate * mhat / (np.sqrt(vhat) + config.adam_eps)
            updated.append(Tensor(tensor.data - step.astype(tensor.data.dtype)))
        new_weights[name] = (updated[0], updated[1])
    return NetworkParams(params.architecture, new_weights)


def _iteration_rng(seed: int, iteration: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, iteration, slot)))


def finetune(
    params: NetworkParams,
    samples,
    train_config: TrainConfig = TrainConfig(),
    loss_config: losses.LossConfig = losses.LossConfig(),
    checkpoint_dir=None,
):
    """Fine-tune params on labeled frames; returns (params, stats list).

    Aborts with TrainingDivergedError when the loss goes non-finite. With
    checkpoint_every > 0, periodic checkpoints land in checkpoint_dir.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("finetune needs a nonempty dataset")
    state = AdamState()
    history: list[IterationStats] = []
    for it in range(train_config.iterations):
        batch_rng = _iteration_rng(train_config.seed, it, 0)
        picks = batch_rng.integers(0, len(samples), size=train_config.batch_size)
        grads_acc: dict[str, np.ndarray] = {}
        tot = det = desc = spec = 0.0
        for slot, sample_idx in enumerate(picks):
            sample = samples[int(sample_idx)]
            h_img, w_img = sample.image.shape
            hom_rng = _iteration_rng(train_config.seed, it, 1 + slot)
            h_unit = sample_homography(hom_rng, train_config.homography)
            h_px = to_pixel_frame(h_unit, h_img, w_img)
            warped = warp_image(sample.image, h_px)
            warped_label = warp_label(sample.label, h_px, h_img, w_img)
            corr = correspondence_tensor(h_px, h_img, w_img)
            neg_mask = None
            if loss_config.negative_keep < 1.0:
                hc, wc = h_img // 8, w_img // 8
                n = hc * wc
                neg_mask = hom_rng.random((n, n)) < loss_config.negative_keep

            dtype = params.dtype()
            img_a = Tensor(sample.image, dtype=dtype)
            img_b = Tensor(warped, dtype=dtype)
            terms: dict = {}
            with GradTape() as tape:
                heads_a = network.forward(params, img_a)
                heads_b = network.forward(params, img_b)
                loss = losses.specular_pair_loss(
                    img_a, heads_a, sample.label, img_b, heads_b, warped_label,
                    corr, loss_config, neg_mask, terms,
                )
                scaled = T.affine(loss, 1.0 / train_config.batch_size, 0.0)
                grads = backward(tape, scaled)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(it, value)
            tot += value / train_config.batch_size
            det += terms["detection"] / train_config.batch_size
            desc += terms["descriptor"] / train_config.batch_size
            spec += terms["specularity"] / train_config.batch_size
            for label, tensor in params.param_tensors():
                g = grads.get(tensor)
                acc = grads_acc.get(label)
                grads_acc[label] = g if acc is None else acc + g

        if not np.isfinite(tot):
            raise TrainingDivergedError(it, tot)
        params = adam_step(params, grads_acc, state, train_config)
        history.append(IterationStats(it, tot, det, desc, spec))
        if (
            checkpoint_dir is not None
            and train_config.checkpoint_every > 0
            and (it + 1) % train_config.checkpoint_every == 0
        ):
            save_checkpoint(checkpoint_dir, it + 1, params, state)
    return params, history


# ---------------------------------------------------------------------------
# checkpoints: weights file + sidecar text with optimizer state
# ---------------------------------------------------------------------------


def checkpoint_paths(directory, iteration: int):
    base = os.path.join(os.fspath(directory), f"checkpoint_{iteration:06d}")
    return base + ".weights", base + ".opt"


def save_checkpoint(directory, iteration: int, params: NetworkParams, state: AdamState) -> None:
    wpath, opath = checkpoint_paths(directory, iteration)
    network.save_weights(params, wpath)
    lines = [f"iteration {iteration}", f"step {state.step}"]
    for label in sorted(state.m):
        lines.append(f"m {label} " + " ".join(fmt(v) for v in state.m[label].ravel()))
        lines.append(f"v {label} " + " ".join(fmt(v) for v in state.v[label].ravel()))
    atomic_write_text(opath, "".join(l + "\n" for l in lines))


def load_checkpoint(directory, iteration: int):
    """Returns (params, AdamState, iteration). Moments keep stored shapes."""
    wpath, opath = checkpoint_paths(directory, iteration)
    params = network.load_weights(wpath)
    state = AdamState()
    shapes = {f"{n}.{s}": t.shape for n, (k, b) in params.weights.items() for s, t in (("kernel", k), ("bias", b))}
    stored_iteration = iteration
    with open(opath, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "iteration":
                stored_iteration = int(parts[1])
            elif parts[0] == "step":
                state.step = int(parts[1])
            elif parts[0] in ("m", "v"):
                label = parts[1]
                arr = np.asarray([float(v) for v in parts[2:]]).reshape(shapes[label])
                (state.m if parts[0] == "m" else state.v)[label] = arr
    return params, state, stored_iteration


def history_csv(history) -> str:
    lines = ["iteration,total,detection,descriptor,specularity"]
    for h in history:
        lines.append(
            f"{h.iteration},{fmt(h.total)},{fmt(h.detection)},{fmt(h.descriptor)},{fmt(h.specularity)}"
        )
    return "".join(l + "\n" for l in lines)

"""Minimal float64 MLP kernel: ReLU hidden layers, Adam, flat binary checkpoints.

Everything is plain numpy so training runs are bit-reproducible for a fixed
seed; checkpoints are byte-identical across saves of the same parameters
(raw little-endian buffers behind a canonical JSON header, no timestamps).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"BALMNET1"

ADAM_LR = 3e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Mlp:
    """Fully-connected net; ``widths`` runs input to output inclusive."""

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def num_layers(self) -> int:
        return len(self.weights)


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def mlp_init(widths, seed_or_rng=0) -> Mlp:
    """Fan-in uniform weights U(+-1/sqrt(fan_in)), zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"widths must be at least [in, out] of positive ints, got {widths}")
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(widths=widths, weights=weights, biases=biases)


def _as_batch(x: np.ndarray, width: int) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != width:
        raise ValueError(f"input width {x.shape[1]} does not match net input {width}")
    return x


def mlp_forward(net: Mlp, x) -> np.ndarray:
    h = _as_batch(x, net.widths[0])
    last = net.num_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h


def mlp_forward_cached(net: Mlp, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass keeping every layer's activation for the backward pass."""
    activations = [_as_batch(x, net.widths[0])]
    last = net.num_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = activations[-1] @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
        activations.append(h)
    return activations[-1], activations


def mlp_backward(
    net: Mlp, activations: list[np.ndarray], grad_out: np.ndarray
) -> tuple[MlpGrads, np.ndarray]:
    """Backprop ``grad_out`` (B, out); returns parameter grads and d/d(input)."""
    delta = np.asarray(grad_out, dtype=float)
    grads_w: list = [None] * net.num_layers
    grads_b: list = [None] * net.num_layers
    for k in reversed(range(net.num_layers)):
        grads_w[k] = activations[k].T @ delta
        grads_b[k] = delta.sum(axis=0)
        delta = delta @ net.weights[k].T
        if k > 0:
            # ReLU gate; activations store max(z, 0) so positivity is the mask
            delta = delta * (activations[k] > 0.0)
    return MlpGrads(weights=grads_w, biases=grads_b), delta


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over batch and output dims; returns (loss, d loss/d pred)."""
    diff = pred - np.asarray(target, dtype=float)
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class AdamState:
    m_weights: list[np.ndarray]
    v_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_biases: list[np.ndarray]
    step: int = 0


def adam_init(net: Mlp) -> AdamState:
    return AdamState(
        m_weights=[np.zeros_like(w) for w in net.weights],
        v_weights=[np.zeros_like(w) for w in net.weights],
        m_biases=[np.zeros_like(b) for b in net.biases],
        v_biases=[np.zeros_like(b) for b in net.biases],
    )


def adam_step(
    net: Mlp,
    grads: MlpGrads,
    state: AdamState,
    lr: float = ADAM_LR,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam update applied in place."""
    state.step += 1
    correct1 = 1.0 - beta1**state.step
    correct2 = 1.0 - beta2**state.step
    groups = (
        (net.weights, grads.weights, state.m_weights, state.v_weights),
        (net.biases, grads.biases, state.m_biases, state.v_biases),
    )
    for params, grad_list, m_list, v_list in groups:
        for i, grad in enumerate(grad_list):
            m_list[i] = beta1 * m_list[i] + (1.0 - beta1) * grad
            v_list[i] = beta2 * v_list[i] + (1.0 - beta2) * grad * grad
            m_hat = m_list[i] / correct1
            v_hat = v_list[i] / correct2
            params[i] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def mlp_train_step(net: Mlp, adam: AdamState, x, y, lr: float = ADAM_LR) -> float:
    """One squared-error gradient step; returns the pre-update loss."""
    pred, cache = mlp_forward_cached(net, x)
    loss, grad = mse_loss(pred, np.atleast_2d(np.asarray(y, dtype=float)))
    grads, _ = mlp_backward(net, cache, grad)
    adam_step(net, grads, adam, lr=lr)
    return loss


def mlp_copy(net: Mlp) -> Mlp:
    return Mlp(
        widths=list(net.widths),
        weights=[w.copy() for w in net.weights],
        biases=[b.copy() for b in net.biases],
    )


def copy_params(target: Mlp, source: Mlp) -> None:
    """Hard parameter copy into an existing net (target network refresh)."""
    for dst, src in zip(target.weights, source.weights):
        dst[...] = src
    for dst, src in zip(target.biases, source.biases):
        dst[...] = src


def polyak_update(target: Mlp, source: Mlp, tau: float) -> None:
    """target <- (1 - tau) * target + tau * source, in place."""
    for dst, src in zip(target.weights, source.weights):
        dst *= 1.0 - tau
        dst += tau * src
    for dst, src in zip(target.biases, source.biases):
        dst *= 1.0 - tau
        dst += tau * src


# ---------------------------------------------------------------------------
# Checkpoints: magic + canonical JSON header + raw '<f8' buffers in header
# order. No timestamps or environment data, so identical parameters always
# produce identical bytes.


def save_arrays(path, meta: dict, arrays: dict) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        entries.append({"name": str(name), "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    try:
        header = json.loads(data[offset : offset + header_len])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt checkpoint header") from exc
    offset += header_len
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ValueError(f"{path}: checkpoint truncated at array {entry['name']!r}")
        arrays[entry["name"]] = (
            np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset = end
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return header["meta"], arrays


def mlp_to_arrays(net: Mlp, prefix: str = "") -> dict:
    arrays = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"{prefix}w{i}"] = w
        arrays[f"{prefix}b{i}"] = b
    return arrays


def mlp_from_arrays(widths, arrays: dict, prefix: str = "") -> Mlp:
    widths = [int(w) for w in widths]
    weights = []
    biases = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = arrays[f"{prefix}w{i}"]
        b = arrays[f"{prefix}b{i}"]
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ValueError(f"layer {i}: arrays do not match widths {widths}")
        weights.append(w)
        biases.append(b)
    return Mlp(widths=widths, weights=weights, biases=biases)


def save_mlp(path, net: Mlp, meta: dict | None = None) -> None:
    full_meta = {"kind": "mlp", "widths": list(net.widths)}
    if meta:
        full_meta.update(meta)
    save_arrays(path, full_meta, mlp_to_arrays(net))


def load_mlp(path) -> tuple[Mlp, dict]:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "mlp":
        raise ValueError(f"{path}: checkpoint is not a plain net")
    return mlp_from_arrays(meta["widths"], arrays), meta

"""Encoder/decoder MLP with hand-written backprop and optimizers.

The net is a mirror pair: encoder ``d -> hidden -> embed`` and decoder
``embed -> hidden -> d``, leaky-ReLU on hidden layers, linear outputs.
Gradients flow from two places at once during pretraining: the decoder
output (reconstruction) and the embedding itself (contrastive and
distance terms), so ``backward`` takes both upstream gradients.

Parameter order everywhere (flatten, checkpoints, wire payloads) is:
encoder layers then decoder layers, each layer's weight (row-major,
fan_in x fan_out) before its bias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, StaleTraceError, TrainingDivergenceError
from .numerics import RngStream

__all__ = [
    "LEAK",
    "LayerParams",
    "MlpParams",
    "ForwardTrace",
    "OptState",
    "init_params",
    "encode",
    "decode",
    "forward_traced",
    "backward",
    "backward_views",
    "opt_step",
    "flatten",
    "unflatten",
    "layer_shapes",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
]

LEAK = 0.01

CHECKPOINT_FORMAT = "cflsim-mlp-v1"


def _leaky(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0.0, z, LEAK * z)


def _dleaky(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0.0, 1.0, LEAK)


@dataclass(eq=False)
class LayerParams:
    """One affine layer; also reused as the container for its gradients."""

    weight: np.ndarray
    bias: np.ndarray

    def copy(self) -> "LayerParams":
        return LayerParams(self.weight.copy(), self.bias.copy())


@dataclass(eq=False)
class MlpParams:
    encoder: list[LayerParams]
    decoder: list[LayerParams]

    @property
    def dims(self) -> tuple[int, int, int]:
        """(d_in, hidden, embed) recovered from layer shapes."""
        return (
            self.encoder[0].weight.shape[0],
            self.encoder[0].weight.shape[1],
            self.encoder[1].weight.shape[1],
        )

    def copy(self) -> "MlpParams":
        return MlpParams(
            encoder=[l.copy() for l in self.encoder],
            decoder=[l.copy() for l in self.decoder],
        )

    def layers(self) -> list[LayerParams]:
        return list(self.encoder) + list(self.decoder)


def layer_shapes(d_in: int, hidden: int, embed: int) -> list[tuple[int, int]]:
    """Weight shapes in flatten order."""
    return [(d_in, hidden), (hidden, embed), (embed, hidden), (hidden, d_in)]


def parameter_count(d_in: int, hidden: int, embed: int) -> int:
    return sum(i * o + o for i, o in layer_shapes(d_in, hidden, embed))


def init_params(d_in: int, hidden: int, embed: int, rng: RngStream) -> MlpParams:
    """Xavier-uniform weights (+-sqrt(6 / (fan_in + fan_out))), zero biases."""
    if min(d_in, hidden, embed) < 1:
        raise ConfigError(f"layer sizes must be positive, got {(d_in, hidden, embed)}")
    g = rng.generator()
    layers = []
    for fan_in, fan_out in layer_shapes(d_in, hidden, embed):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(LayerParams(
            weight=g.uniform(-bound, bound, size=(fan_in, fan_out)),
            bias=np.zeros(fan_out),
        ))
    return MlpParams(encoder=layers[:2], decoder=layers[2:])


def _check_input(x, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what} expects (*, {width}), got {x.shape}")
    return x


def encode(params: MlpParams, x) -> np.ndarray:
    """Embed a batch; deterministic, input untouched."""
    x = _check_input(x, params.dims[0], "encode")
    h = _leaky(x @ params.encoder[0].weight + params.encoder[0].bias)
    return h @ params.encoder[1].weight + params.encoder[1].bias


def decode(params: MlpParams, e) -> np.ndarray:
    """Reconstruct a batch from embeddings; linear output layer."""
    e = _check_input(e, params.dims[2], "decode")
    h = _leaky(e @ params.decoder[0].weight + params.decoder[0].bias)
    return h @ params.decoder[1].weight + params.decoder[1].bias


@dataclass(eq=False)
class ForwardTrace:
    """Cached forward pass for one view of one batch.

    Holds the exact parameter object it was built from; ``backward``
    refuses a trace whose parameters have since been replaced.
    """

    params: MlpParams
    x: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    embedding: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    reconstruction: np.ndarray


def forward_traced(params: MlpParams, x) -> ForwardTrace:
    """Forward pass through encoder and decoder, keeping intermediates."""
    x = _check_input(x, params.dims[0], "forward")
    enc1, enc2 = params.encoder
    dec1, dec2 = params.decoder
    z1 = x @ enc1.weight + enc1.bias
    h1 = _leaky(z1)
    e = h1 @ enc2.weight + enc2.bias
    z2 = e @ dec1.weight + dec1.bias
    h2 = _leaky(z2)
    xd = h2 @ dec2.weight + dec2.bias
    return ForwardTrace(params=params, x=x, z1=z1, h1=h1, embedding=e,
                        z2=z2, h2=h2, reconstruction=xd)


def backward(params: MlpParams, trace: ForwardTrace, d_embedding,
             d_reconstruction) -> MlpParams:
    """Parameter gradients for one view.

    ``d_embedding`` is the loss gradient taken directly at the embedding
    (contrastive + distance terms); ``d_reconstruction`` the gradient at
    the decoder output. The decoder path contributes to the embedding
    gradient internally. Returns gradients in an ``MlpParams``-shaped
    container.
    """
    if trace.params is not params:
        raise StaleTraceError("trace was built from different parameters")
    d_e_extra = np.asarray(d_embedding, dtype=np.float64)
    d_xd = np.asarray(d_reconstruction, dtype=np.float64)
    if d_e_extra.shape != trace.embedding.shape:
        raise ShapeError(
            f"embedding grad {d_e_extra.shape} vs {trace.embedding.shape}")
    if d_xd.shape != trace.reconstruction.shape:
        raise ShapeError(
            f"reconstruction grad {d_xd.shape} vs {trace.reconstruction.shape}")

    enc1, enc2 = params.encoder
    dec1, dec2 = params.decoder

    g_dec2_w = trace.h2.T @ d_xd
    g_dec2_b = d_xd.sum(axis=0)
    d_h2 = d_xd @ dec2.weight.T
    d_z2 = d_h2 * _dleaky(trace.z2)
    g_dec1_w = trace.embedding.T @ d_z2
    g_dec1_b = d_z2.sum(axis=0)

    d_e = d_z2 @ dec1.weight.T + d_e_extra
    g_enc2_w = trace.h1.T @ d_e
    g_enc2_b = d_e.sum(axis=0)
    d_h1 = d_e @ enc2.weight.T
    d_z1 = d_h1 * _dleaky(trace.z1)
    g_enc1_w = trace.x.T @ d_z1
    g_enc1_b = d_z1.sum(axis=0)

    return MlpParams(
        encoder=[LayerParams(g_enc1_w, g_enc1_b), LayerParams(g_enc2_w, g_enc2_b)],
        decoder=[LayerParams(g_dec1_w, g_dec1_b), LayerParams(g_dec2_w, g_dec2_b)],
    )


def backward_views(params: MlpParams, trace1: ForwardTrace, trace2: ForwardTrace,
                   d_embed1, d_embed2, d_recon1, d_recon2) -> MlpParams:
    """Sum of per-view gradients; encoder and decoder are shared across views."""
    g1 = backward(params, trace1, d_embed1, d_recon1)
    g2 = backward(params, trace2, d_embed2, d_recon2)
    out = g1
    for a, b in zip(out.layers(), g2.layers()):
        a.weight += b.weight
        a.bias += b.bias
    return out


@dataclass(eq=False)
class OptState:
    """Optimizer state over the flat parameter vector.

    ``kind`` is "adam" (default) or "sgd"; SGD ignores the moment buffers.
    Moments are allocated lazily on the first step.
    """

    learning_rate: float
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning rate must be positive")


def opt_step(params: MlpParams, grads: MlpParams, opt: OptState) -> MlpParams:
    """One optimizer update; returns new parameters, mutates ``opt``.

    Two successive steps differ from one step at twice the rate whenever
    Adam moments are non-trivial, which is why state lives in ``opt``.
    """
    d_in, hidden, embed = params.dims
    flat = flatten(params)
    g = flatten(grads)
    if g.shape != flat.shape:
        raise ShapeError(f"gradient length {g.shape[0]} vs parameters {flat.shape[0]}")
    if not np.all(np.isfinite(g)):
        raise TrainingDivergenceError("non-finite gradient in optimizer step")

    if opt.kind == "sgd":
        new = flat - opt.learning_rate * g
    else:
        if opt.m is None:
            opt.m = np.zeros_like(flat)
            opt.v = np.zeros_like(flat)
        opt.step += 1
        opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
        opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * (g * g)
        m_hat = opt.m / (1.0 - opt.beta1 ** opt.step)
        v_hat = opt.v / (1.0 - opt.beta2 ** opt.step)
        new = flat - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)
    if not np.all(np.isfinite(new)):
        raise TrainingDivergenceError("non-finite parameters after optimizer step")
    return unflatten(new, d_in, hidden, embed)


def flatten(params: MlpParams) -> np.ndarray:
    """Lossless 1-D view: encoder then decoder, weight before bias, row-major."""
    parts = []
    for layer in params.layers():
        parts.append(layer.weight.ravel())
        parts.append(layer.bias.ravel())
    return np.concatenate(parts)


def unflatten(flat: np.ndarray, d_in: int, hidden: int, embed: int) -> MlpParams:
    """Inverse of ``flatten`` for the given architecture."""
    flat = np.asarray(flat, dtype=np.float64).ravel()
    expected = parameter_count(d_in, hidden, embed)
    if flat.shape[0] != expected:
        raise ShapeError(
            f"flat vector has {flat.shape[0]} entries, architecture "
            f"{(d_in, hidden, embed)} needs {expected}")
    layers = []
    pos = 0
    for fan_in, fan_out in layer_shapes(d_in, hidden, embed):
        w = flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy()
        pos += fan_in * fan_out
        b = flat[pos:pos + fan_out].copy()
        pos += fan_out
        layers.append(LayerParams(w, b))
    return MlpParams(encoder=layers[:2], decoder=layers[2:])


def save_checkpoint(params: MlpParams, path) -> None:
    """Write parameters to disk.

    Byte layout: one UTF-8 JSON header line (format tag, dims, parameter
    count, dtype) terminated by ``\\n``, then the flat parameter vector as
    little-endian float64.
    """
    d_in, hidden, embed = params.dims
    header = {
        "format": CHECKPOINT_FORMAT,
        "d_in": d_in,
        "hidden": hidden,
        "embed": embed,
        "count": parameter_count(d_in, hidden, embed),
        "dtype": "<f8",
    }
    payload = flatten(params).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_checkpoint(path) -> MlpParams:
    """Read a checkpoint written by ``save_checkpoint``."""
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ShapeError(f"unreadable checkpoint header in {path}: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ShapeError(f"unknown checkpoint format {header.get('format')!r}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if flat.shape[0] != header["count"]:
        raise ShapeError(
            f"checkpoint payload has {flat.shape[0]} floats, header says "
            f"{header['count']}")
    return unflatten(flat, header["d_in"], header["hidden"], header["embed"])

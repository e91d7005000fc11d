"""Two-stream encoders: a patch-affine vision map and an affine audio map.

Each stream is one affine layer followed by tanh. The vision stream cuts
the image into non-overlapping ``p x p`` patches, projects each patch to
``c`` channels and yields a ``c x h x w`` feature grid; the audio stream
flattens the spectrogram grid and maps it to a single ``c``-vector. This
is deliberately the smallest architecture whose gradients can be checked
exhaustively against finite differences while still separating the
synthetic classes.

Internally, batched helpers use a "site-major" layout ``(n, h*w, c)`` for
vision features; the public dataclasses use ``(c, h, w)``. Sites are
enumerated row-major over the feature grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    """Parameter checkpoint file is malformed."""


@dataclass(frozen=True)
class EncoderConfig:
    """Shape configuration shared by both streams."""

    channels: int = 16
    patch_size: int = 4
    image_size: tuple[int, int] = (32, 32)
    audio_size: tuple[int, int] = (8, 16)

    def validate(self) -> None:
        hv, wv = self.image_size
        ha, wa = self.audio_size
        if self.channels < 1 or self.patch_size < 1:
            raise ValueError("channels and patch_size must be positive")
        if min(hv, wv, ha, wa) < 1:
            raise ValueError("image and audio dimensions must be positive")
        if hv % self.patch_size or wv % self.patch_size:
            raise ValueError(
                f"patch_size {self.patch_size} must divide image size {hv}x{wv}"
            )

    @property
    def grid_size(self) -> tuple[int, int]:
        return (
            self.image_size[0] // self.patch_size,
            self.image_size[1] // self.patch_size,
        )

    @property
    def n_sites(self) -> int:
        h, w = self.grid_size
        return h * w

    @property
    def vision_input_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def audio_input_dim(self) -> int:
        return self.audio_size[0] * self.audio_size[1]


@dataclass
class VisionFeature:
    """Feature grid of shape (c, h, w)."""

    values: np.ndarray


@dataclass
class AudioFeature:
    """Feature vector of length c."""

    values: np.ndarray


@dataclass
class EncoderParams:
    """Weights and biases of both streams.

    ``vision_weights`` is (c, 3*p*p) and acts on flattened patches (channel,
    row, column order); ``audio_weights`` is (c, Ha*Wa) and acts on the
    flattened audio grid. The same structure doubles as a gradient
    container.
    """

    config: EncoderConfig
    vision_weights: np.ndarray
    vision_bias: np.ndarray
    audio_weights: np.ndarray
    audio_bias: np.ndarray

    def validate(self) -> None:
        cfg = self.config
        cfg.validate()
        c = cfg.channels
        expected = {
            "vision_weights": (c, cfg.vision_input_dim),
            "vision_bias": (c,),
            "audio_weights": (c, cfg.audio_input_dim),
            "audio_bias": (c,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            config=self.config,
            vision_weights=self.vision_weights.copy(),
            vision_bias=self.vision_bias.copy(),
            audio_weights=self.audio_weights.copy(),
            audio_bias=self.audio_bias.copy(),
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.vision_weights.ravel(),
                self.vision_bias.ravel(),
                self.audio_weights.ravel(),
                self.audio_bias.ravel(),
            ]
        )

    @classmethod
    def from_vector(cls, config: EncoderConfig, vec: np.ndarray) -> "EncoderParams":
        c = config.channels
        dv, da = config.vision_input_dim, config.audio_input_dim
        sizes = [c * dv, c, c * da, c]
        if vec.size != sum(sizes):
            raise ValueError(f"vector has {vec.size} entries, expected {sum(sizes)}")
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        return cls(
            config=config,
            vision_weights=parts[0].reshape(c, dv),
            vision_bias=parts[1].copy(),
            audio_weights=parts[2].reshape(c, da),
            audio_bias=parts[3].copy(),
        )


def zeros_like_params(config: EncoderConfig) -> EncoderParams:
    c = config.channels
    return EncoderParams(
        config=config,
        vision_weights=np.zeros((c, config.vision_input_dim)),
        vision_bias=np.zeros(c),
        audio_weights=np.zeros((c, config.audio_input_dim)),
        audio_bias=np.zeros(c),
    )


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Seeded uniform init on [-s, s], s = 1/sqrt(fan_in) per stream.

    Draw order: vision weights, vision bias, audio weights, audio bias.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    c = config.channels
    sv = 1.0 / np.sqrt(config.vision_input_dim)
    sa = 1.0 / np.sqrt(config.audio_input_dim)
    return EncoderParams(
        config=config,
        vision_weights=rng.uniform(-sv, sv, size=(c, config.vision_input_dim)),
        vision_bias=rng.uniform(-sv, sv, size=c),
        audio_weights=rng.uniform(-sa, sa, size=(c, config.audio_input_dim)),
        audio_bias=rng.uniform(-sa, sa, size=c),
    )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(n, 3, H, W) -> (n, h*w, 3*p*p), sites row-major, patches (ch, py, px)."""
    n, ch, hv, wv = images.shape
    p = patch_size
    h, w = hv // p, wv // p
    x = images.reshape(n, ch, h, p, w, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, h * w, ch * p * p)


def unpatchify(patches: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """Inverse of :func:`patchify` for a single image, (h*w, 3*p*p) -> (3, H, W)."""
    p = config.patch_size
    h, w = config.grid_size
    x = patches.reshape(h, w, 3, p, p)
    x = x.transpose(2, 0, 3, 1, 4)
    return x.reshape(3, h * p, w * p)


def encode_vision_batch(params: EncoderParams, images: np.ndarray) -> np.ndarray:
    """(n, 3, H, W) -> site-major features (n, h*w, c)."""
    cfg = params.config
    if images.shape[1:] != (3, *cfg.image_size):
        raise ValueError(
            f"images have shape {images.shape[1:]}, expected (3, {cfg.image_size})"
        )
    patches = patchify(images, cfg.patch_size)
    return np.tanh(patches @ params.vision_weights.T + params.vision_bias)


def encode_audio_batch(params: EncoderParams, audios: np.ndarray) -> np.ndarray:
    """(n, 1, Ha, Wa) -> feature vectors (n, c)."""
    cfg = params.config
    if audios.shape[1:] != (1, *cfg.audio_size):
        raise ValueError(
            f"audios have shape {audios.shape[1:]}, expected (1, {cfg.audio_size})"
        )
    flat = audios.reshape(audios.shape[0], -1)
    return np.tanh(flat @ params.audio_weights.T + params.audio_bias)


def sites_to_grid(sites: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """(h*w, c) -> (c, h, w)."""
    h, w = config.grid_size
    return sites.reshape(h, w, -1).transpose(2, 0, 1)


def grid_to_sites(grid: np.ndarray) -> np.ndarray:
    """(c, h, w) -> (h*w, c)."""
    c = grid.shape[0]
    return grid.reshape(c, -1).T


def encode_vision(params: EncoderParams, image: np.ndarray) -> VisionFeature:
    """Patch projection plus tanh: image (3, H, W) -> feature grid (c, h, w)."""
    sites = encode_vision_batch(params, image[None])[0]
    return VisionFeature(values=sites_to_grid(sites, params.config))


def encode_audio(params: EncoderParams, audio: np.ndarray) -> AudioFeature:
    """Flatten, affine map, tanh: audio (1, Ha, Wa) -> feature vector (c,)."""
    return AudioFeature(values=encode_audio_batch(params, audio[None])[0])


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def vision_backward_batch(
    params: EncoderParams,
    images: np.ndarray,
    outputs: np.ndarray,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Parameter gradients of the vision stream.

    ``outputs`` and ``upstream`` are site-major (n, h*w, c); returns
    (d_weights, d_bias). tanh' is recovered from the cached outputs.
    """
    dz = upstream * (1.0 - outputs * outputs)
    patches = patchify(images, params.config.patch_size)
    d_weights = np.einsum("nsc,nsd->cd", dz, patches)
    return d_weights, dz.sum(axis=(0, 1))


def audio_backward_batch(
    params: EncoderParams,
    audios: np.ndarray,
    outputs: np.ndarray,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Parameter gradients of the audio stream; arrays are (n, c)."""
    dz = upstream * (1.0 - outputs * outputs)
    flat = audios.reshape(audios.shape[0], -1)
    return dz.T @ flat, dz.sum(axis=0)


def encode_vision_grad(
    params: EncoderParams, image: np.ndarray, upstream: np.ndarray
) -> tuple[EncoderParams, np.ndarray]:
    """Exact reverse-mode gradients of :func:`encode_vision`.

    ``upstream`` has the output shape (c, h, w). Returns a gradient
    container (audio entries zero) and the gradient w.r.t. the image.
    """
    cfg = params.config
    if upstream.shape != (cfg.channels, *cfg.grid_size):
        raise ValueError(
            f"upstream has shape {upstream.shape}, expected "
            f"({cfg.channels}, {cfg.grid_size})"
        )
    outputs = encode_vision_batch(params, image[None])
    up_sites = grid_to_sites(upstream)[None]
    d_weights, d_bias = vision_backward_batch(params, image[None], outputs, up_sites)
    grads = zeros_like_params(cfg)
    grads.vision_weights = d_weights
    grads.vision_bias = d_bias
    dz = (up_sites * (1.0 - outputs * outputs))[0]
    d_image = unpatchify(dz @ params.vision_weights, cfg)
    return grads, d_image


def encode_audio_grad(
    params: EncoderParams, audio: np.ndarray, upstream: np.ndarray
) -> tuple[EncoderParams, np.ndarray]:
    """Exact reverse-mode gradients of :func:`encode_audio`."""
    cfg = params.config
    if upstream.shape != (cfg.channels,):
        raise ValueError(
            f"upstream has shape {upstream.shape}, expected ({cfg.channels},)"
        )
    outputs = encode_audio_batch(params, audio[None])
    d_weights, d_bias = audio_backward_batch(params, audio[None], outputs, upstream[None])
    grads = zeros_like_params(cfg)
    grads.audio_weights = d_weights
    grads.audio_bias = d_bias
    dz = (upstream[None] * (1.0 - outputs * outputs))[0]
    d_audio = (params.audio_weights.T @ dz).reshape(1, *cfg.audio_size)
    return grads, d_audio


# ---------------------------------------------------------------------------
# checkpoints (AVP1)
# ---------------------------------------------------------------------------


def save_params(params: EncoderParams, path: str | Path) -> None:
    """Write an AVP1 checkpoint; round-trips bit-exactly via repr floats."""
    params.validate()
    cfg = params.config
    lines = [
        f"AVP1 {cfg.channels} {cfg.patch_size} "
        f"{cfg.image_size[0]} {cfg.image_size[1]} "
        f"{cfg.audio_size[0]} {cfg.audio_size[1]}"
    ]
    for arr in (
        params.vision_weights,
        params.vision_bias,
        params.audio_weights,
        params.audio_bias,
    ):
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path: str | Path) -> EncoderParams:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("AVP1"):
        raise CheckpointError(f"missing AVP1 magic in {path}")
    head = lines[0].split()
    if len(head) != 7:
        raise CheckpointError(f"bad AVP1 header: {lines[0]!r}")
    try:
        c, p, hv, wv, ha, wa = (int(tok) for tok in head[1:])
    except ValueError as exc:
        raise CheckpointError(f"non-integer AVP1 header field: {exc}") from exc
    config = EncoderConfig(
        channels=c, patch_size=p, image_size=(hv, wv), audio_size=(ha, wa)
    )
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != 4:
        raise CheckpointError(f"expected 4 parameter arrays, found {len(body)}")
    try:
        arrays = [np.array([float(tok) for tok in ln.split()]) for ln in body]
    except ValueError as exc:
        raise CheckpointError(f"bad parameter payload: {exc}") from exc
    shapes = [
        (c, 3 * p * p),
        (c,),
        (c, ha * wa),
        (c,),
    ]
    for arr, shape in zip(arrays, shapes):
        if arr.size != np.prod(shape):
            raise CheckpointError(
                f"parameter array has {arr.size} entries, expected {np.prod(shape)}"
            )
    params = EncoderParams(
        config=config,
        vision_weights=arrays[0].reshape(shapes[0]),
        vision_bias=arrays[1],
        audio_weights=arrays[2].reshape(shapes[2]),
        audio_bias=arrays[3],
    )
    params.validate()
    return params

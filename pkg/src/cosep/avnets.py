"""The three networks: image analysis, audio analysis, mask synthesizer.

The image net is a small dilated convolutional stack (stride-2 stages
followed by a dilated stage) that emits K pre-activation channel maps;
spatial max pooling turns them into the K-vector that the activation
head (sigmoid, or temperature softmax) squashes.  The audio net is a
skip-connected encoder-decoder over the warped spectrogram grid emitting
K same-resolution feature planes.  The synthesizer is a single linear
layer over the visually weighted audio channels.

Batch norm is deliberately absent; a per-channel learnable affine
follows every convolution instead, which keeps forward passes free of
batch statistics and therefore bit-reproducible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .checkpoint import load_tensors, save_tensors
from .dsp import MaskPlane
from .tensor import Tensor

MODES = ("sigmoid", "softmax")


@dataclass(frozen=True)
class ImageNetCfg:
    """Stages are (width, stride, dilation) triples applied in order; a
    1x1 head then maps to the shared channel count."""

    input_size: int = 64
    channels: int = 16
    stages: tuple = ((12, 2, 1), (24, 2, 1), (48, 2, 1), (48, 1, 2))

    @property
    def downsample(self) -> int:
        d = 1
        for _, stride, _ in self.stages:
            d *= stride
        return d

    @property
    def map_size(self) -> int:
        if self.input_size % self.downsample:
            raise ValueError(
                f"input size {self.input_size} not divisible by downsample {self.downsample}")
        return self.input_size // self.downsample


@dataclass(frozen=True)
class AudioNetCfg:
    """widths[0] is the full-resolution stem; widths[1:] the encoder
    stages (grid halves at each)."""

    grid: int = 64
    depth: int = 4
    channels: int = 16
    widths: tuple = (8, 16, 24, 32, 48)

    def __post_init__(self):
        if len(self.widths) != self.depth + 1:
            raise ValueError(f"need {self.depth + 1} widths for depth {self.depth}")
        if self.grid % (1 << self.depth):
            raise ValueError(f"grid {self.grid} not divisible by 2^{self.depth}")


# paper-scale presets: 224->14 maps with a trailing dilated stage; 256x256
# U-Net with 7 down / 7 up convolutions
PAPER_IMAGE_CFG = ImageNetCfg(input_size=224, channels=32,
                              stages=((64, 2, 1), (128, 2, 1), (256, 2, 1), (512, 2, 1), (512, 1, 2)))
PAPER_AUDIO_CFG = AudioNetCfg(grid=256, depth=7, channels=32,
                              widths=(16, 32, 64, 128, 256, 512, 512, 512))


def _he_conv(rng, f, c, k, scale=1.0):
    std = scale * float(np.sqrt(2.0 / (c * k * k)))
    return Tensor((rng.standard_normal((f, c, k, k)) * std).astype(np.float32), requires_grad=True)


class _ConvBlock:
    """conv -> per-channel affine -> relu."""

    def __init__(self, rng, c_in, c_out, stride=1, dilation=1, kernel=3):
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (kernel - 1) // 2
        self.w = _he_conv(rng, c_out, c_in, kernel)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.gamma = Tensor(np.ones((1, c_out, 1, 1), dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros((1, c_out, 1, 1), dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        y = tc.conv2d(x, self.w, self.b, stride=self.stride,
                      padding=self.padding, dilation=self.dilation)
        return tc.relu(tc.add(tc.mul(y, self.gamma), self.beta))

    def params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b,
                f"{prefix}.g": self.gamma, f"{prefix}.beta": self.beta}


class ImageNet:
    def __init__(self, cfg: ImageNetCfg, rng):
        self.cfg = cfg
        self.blocks = []
        c_in = 3
        for width, stride, dilation in cfg.stages:
            self.blocks.append(_ConvBlock(rng, c_in, width, stride=stride, dilation=dilation))
            c_in = width
        self.head_w = _he_conv(rng, cfg.channels, c_in, 1, scale=0.25)
        self.head_b = Tensor(np.zeros(cfg.channels, dtype=np.float32), requires_grad=True)

    def maps(self, frames: Tensor) -> Tensor:
        """Pre-activation K channel maps for NCHW float frames in [0,1]."""
        n, c, h, w = frames.shape
        if c != 3 or h != self.cfg.input_size or w != self.cfg.input_size:
            raise ValueError(
                f"image net expects Nx3x{self.cfg.input_size}x{self.cfg.input_size}, got {frames.shape}")
        x = frames
        for block in self.blocks:
            x = block(x)
        return tc.conv2d(x, self.head_w, self.head_b)

    def params(self):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"img.s{i}"))
        out["img.head.w"] = self.head_w
        out["img.head.b"] = self.head_b
        return out


class AudioNet:
    def __init__(self, cfg: AudioNetCfg, rng):
        self.cfg = cfg
        w = cfg.widths
        self.stem = _ConvBlock(rng, 1, w[0])
        self.down = [_ConvBlock(rng, w[i], w[i + 1], stride=2) for i in range(cfg.depth)]
        self.up = [_ConvBlock(rng, w[i + 1] + w[i], w[i]) for i in range(cfg.depth)]
        self.head_w = _he_conv(rng, cfg.channels, w[0], 1, scale=0.25)
        self.head_b = Tensor(np.zeros(cfg.channels, dtype=np.float32), requires_grad=True)

    def feats(self, spec: Tensor) -> Tensor:
        """K pre-activation feature planes; input magnitudes are
        log-compressed on entry."""
        n, c, g, g2 = spec.shape
        if c != 1 or g != self.cfg.grid or g2 != self.cfg.grid:
            raise ValueError(
                f"audio net expects Nx1x{self.cfg.grid}x{self.cfg.grid}, got {spec.shape}")
        x = Tensor(np.log1p(np.maximum(spec.data, 0)))
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        y = skips[-1]
        for i in range(self.cfg.depth - 1, -1, -1):
            size = skips[i].shape[2]
            y = tc.upsample_bilinear(y, size, size)
            y = self.up[i](tc.concat([y, skips[i]], axis=1))
        return tc.conv2d(y, self.head_w, self.head_b)

    def params(self):
        out = self.stem.params("aud.stem")
        for i, block in enumerate(self.down):
            out.update(block.params(f"aud.d{i}"))
        for i, block in enumerate(self.up):
            out.update(block.params(f"aud.u{i}"))
        out["aud.head.w"] = self.head_w
        out["aud.head.b"] = self.head_b
        return out


class ModelBundle:
    """Parameters and hyperparameters of all three networks plus the
    active activation head (mode + temperature)."""

    def __init__(self, image_cfg: ImageNetCfg, audio_cfg: AudioNetCfg, seed: int = 0,
                 mode: str = "sigmoid", temperature: float = 1.0):
        if image_cfg.channels != audio_cfg.channels:
            raise ValueError(
                f"image net K={image_cfg.channels} differs from audio net K={audio_cfg.channels}")
        self.image_cfg = image_cfg
        self.audio_cfg = audio_cfg
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
        self.image = ImageNet(image_cfg, rng)
        self.audio = AudioNet(audio_cfg, rng)
        k = image_cfg.channels
        self.synth_w = Tensor(np.full(k, 1.0 / k, dtype=np.float32), requires_grad=True)
        self.synth_b = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
        self.trained = False
        self.set_mode(mode, temperature)

    @property
    def channels(self) -> int:
        return self.image_cfg.channels

    def set_mode(self, mode: str, temperature: float | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown activation mode {mode!r}")
        if temperature is not None:
            if mode == "softmax" and not temperature > 0:
                raise ValueError("softmax temperature must be positive")
            self.temperature = float(temperature)
        self.mode = mode

    def activate(self, phi: Tensor) -> Tensor:
        if self.mode == "sigmoid":
            return tc.sigmoid(phi)
        return tc.softmax_T(phi, self.temperature)

    def params(self) -> dict:
        out = self.image.params()
        out.update(self.audio.params())
        out["synth.w"] = self.synth_w
        out["synth.b"] = self.synth_b
        return out

    def param_list(self) -> list:
        named = self.params()
        return [named[k] for k in sorted(named)]

    # -- persistence ---------------------------------------------------

    def save(self, path, extra_meta: dict | None = None):
        meta = {
            "kind": "bundle",
            "image_cfg": {"input_size": self.image_cfg.input_size,
                          "channels": self.image_cfg.channels,
                          "stages": [list(s) for s in self.image_cfg.stages]},
            "audio_cfg": {"grid": self.audio_cfg.grid, "depth": self.audio_cfg.depth,
                          "channels": self.audio_cfg.channels,
                          "widths": list(self.audio_cfg.widths)},
            "mode": self.mode,
            "temperature": self.temperature,
            "seed": self.seed,
            "trained": self.trained,
        }
        if extra_meta:
            meta.update(extra_meta)
        save_tensors(path, self.params(), meta)

    @classmethod
    def load(cls, path) -> tuple["ModelBundle", dict]:
        arrays, meta = load_tensors(path)
        if meta.get("kind") != "bundle":
            raise ValueError(f"{path}: not a model bundle checkpoint")
        icfg = ImageNetCfg(input_size=meta["image_cfg"]["input_size"],
                           channels=meta["image_cfg"]["channels"],
                           stages=tuple(tuple(s) for s in meta["image_cfg"]["stages"]))
        acfg = AudioNetCfg(grid=meta["audio_cfg"]["grid"], depth=meta["audio_cfg"]["depth"],
                           channels=meta["audio_cfg"]["channels"],
                           widths=tuple(meta["audio_cfg"]["widths"]))
        bundle = cls(icfg, acfg, seed=meta.get("seed", 0), mode=meta["mode"],
                     temperature=meta["temperature"])
        named = bundle.params()
        missing = set(named) - set(arrays)
        if missing:
            raise ValueError(f"{path}: checkpoint missing tensors {sorted(missing)}")
        for name, param in named.items():
            if arrays[name].shape != param.data.shape:
                raise ValueError(f"{path}: shape mismatch for {name}")
            param.data[...] = arrays[name]
        bundle.trained = bool(meta.get("trained", False))
        return bundle, meta


# ---------------------------------------------------------------------
# functional surface
# ---------------------------------------------------------------------

def image_forward(frames: Tensor, bundle: ModelBundle):
    """Channel maps, pooled feature vector phi, and activated vector v."""
    maps = bundle.image.maps(frames)
    phi = tc.spatial_max_pool(maps)
    return maps, phi, bundle.activate(phi)


def audio_forward(spec: Tensor, bundle: ModelBundle) -> Tensor:
    return bundle.audio.feats(spec)


def synthesize_mask(v: Tensor, feats: Tensor, bundle: ModelBundle) -> Tensor:
    """sigmoid(sum_k w_k * v_k * feats_k + b), one mask plane per sample."""
    n, k = v.shape
    if k != bundle.channels or feats.shape[1] != bundle.channels:
        raise ValueError(
            f"channel mismatch: v has {k}, feats {feats.shape[1]}, bundle {bundle.channels}")
    vv = tc.reshape(v, (n, k, 1, 1))
    ww = tc.reshape(bundle.synth_w, (1, k, 1, 1))
    weighted = tc.mul(tc.mul(vv, ww), feats)
    pre = tc.add(tc.tsum(weighted, axis=1, keepdims=True),
                 tc.reshape(bundle.synth_b, (1, 1, 1, 1)))
    return tc.sigmoid(pre)


def audio_only_masks(feats, channels, binary: bool = False) -> list[MaskPlane]:
    """Per selected channel, sigmoid(feats_k) as a ratio mask on the warped
    grid; thresholded at 0.5 (ties to 1) when binary masks are requested."""
    arr = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("audio_only_masks expects a single sample")
        arr = arr[0]
    k = arr.shape[0]
    masks = []
    for ch in channels:
        if not 0 <= ch < k:
            raise ValueError(f"channel {ch} out of range for {k} channels")
        ratio = 1.0 / (1.0 + np.exp(-arr[ch].astype(np.float64)))
        if binary:
            masks.append(MaskPlane((ratio >= 0.5).astype(np.float32), "binary"))
        else:
            masks.append(MaskPlane(ratio.astype(np.float32), "ratio"))
    return masks


def frames_to_tensor(frames_u8: np.ndarray) -> Tensor:
    """uint8 HWC frame(s) -> float32 NCHW in [0, 1]."""
    arr = np.asarray(frames_u8)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr.astype(np.float32).transpose(0, 3, 1, 2) / 255.0)


def pixelwise_activation(maps: np.ndarray, mode: str, temperature: float) -> np.ndarray:
    """Activation applied at every spatial position of [K, h, w] maps."""
    m = maps.astype(np.float64)
    if mode == "sigmoid":
        return 1.0 / (1.0 + np.exp(-m))
    z = m / temperature
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def segment(frame_u8: np.ndarray, bundle: ModelBundle, channel: int,
            tau: float = 0.5) -> np.ndarray:
    """Image-only segmentation: select one channel map, upsample to the
    input size, threshold at tau times the map maximum."""
    if not 0 < tau < 1:
        raise ValueError(f"threshold tau must lie in (0, 1), got {tau}")
    if not 0 <= channel < bundle.channels:
        raise ValueError(f"channel {channel} out of range")
    if not bundle.trained:
        warnings.warn("segmenting with an untrained bundle", stacklevel=2)
    with tc.no_grad():
        maps = bundle.image.maps(frames_to_tensor(frame_u8))
    act = pixelwise_activation(maps.data[0], bundle.mode, bundle.temperature)
    size = bundle.image_cfg.input_size
    with tc.no_grad():
        up = tc.upsample_bilinear(Tensor(act[None, channel:channel + 1].astype(np.float32)),
                                  size, size)
    plane = up.data[0, 0]
    return plane >= tau * plane.max()

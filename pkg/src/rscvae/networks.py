"""Encoder/decoder networks and the recoding VAE that ties them together.

Two backbones are provided: ``small_conv`` (four stride-2 3x3 conv blocks,
used for 32x32 digit/fashion images) and ``resnet18_w64`` (ResNet-18 with
every stage held at 64 channels, used for 256x256 industrial images).
The decoder always mirrors the encoder and ends in a sigmoid.
"""

import io
import json
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import InvalidInputError, ShapeError
from .latent import DiagonalGaussian, reparameterize
from .losses import ForwardTrace

BACKBONES = ("small_conv", "resnet18_w64")
DEFAULT_WIDTHS = (64, 128, 256, 512)
CHECKPOINT_FORMAT = "rscvae-checkpoint/1"


@dataclass(frozen=True)
class EncoderSpec:
    input_shape: tuple
    latent_dim: int = 128
    backbone: str = "small_conv"
    widths: tuple = DEFAULT_WIDTHS
    log_var_bound: float = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if len(self.input_shape) != 3:
            raise InvalidInputError("input_shape must be (channels, height, width)")
        c, h, w = self.input_shape
        if h != w:
            raise InvalidInputError(f"images must be square, got {h}x{w}")
        if self.backbone not in BACKBONES:
            raise InvalidInputError(f"unknown backbone {self.backbone!r}")
        if self.latent_dim < 1:
            raise InvalidInputError("latent_dim must be positive")
        if self.backbone == "small_conv":
            # 32 is the production size; smaller powers of two serve miniature checks
            if h < 8 or h & (h - 1):
                raise InvalidInputError(f"small_conv needs a power-of-two side >= 8, got {h}")
            if len(self.widths) != 4:
                raise InvalidInputError("small_conv takes exactly four block widths")
        elif h % 32:
            raise InvalidInputError(f"resnet18_w64 needs a side divisible by 32, got {h}")
        if self.log_var_bound is not None and not self.log_var_bound > 0:
            raise InvalidInputError("log_var_bound must be positive or None")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DecoderSpec:
    latent_dim: int
    output_shape: tuple
    backbone: str = "small_conv"
    widths: tuple = DEFAULT_WIDTHS

    def __post_init__(self):
        object.__setattr__(self, "output_shape", tuple(int(v) for v in self.output_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))

    @classmethod
    def mirror(cls, enc):
        return cls(enc.latent_dim, enc.input_shape, enc.backbone, enc.widths)

    def to_dict(self):
        return asdict(self)


def _posterior(head_out, bound):
    mean, log_var = head_out.chunk(2, dim=1)
    if bound is not None:
        # smooth saturation keeps exp(log_var) finite under large optimizer steps
        log_var = bound * torch.tanh(log_var / bound)
    return DiagonalGaussian(mean, log_var)


def _conv_out(size):
    # 3x3, stride 2, padding 1
    return (size - 1) // 2 + 1


class SmallEncoder(nn.Module):
    def __init__(self, spec):
        super().__init__()
        if spec.backbone != "small_conv":
            raise InvalidInputError("SmallEncoder needs backbone='small_conv'")
        self.spec = spec
        c, h, _ = spec.input_shape
        layers = []
        in_ch, size = c, h
        for width in spec.widths:
            layers += [
                nn.Conv2d(in_ch, width, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.LeakyReLU(0.2),
            ]
            in_ch, size = width, _conv_out(size)
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch * size * size, 2 * spec.latent_dim)

    def forward(self, x):
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"expected input (*, {self.spec.input_shape}), got {tuple(x.shape)}"
            )
        h = self.features(x).flatten(1)
        return _posterior(self.head(h), self.spec.log_var_bound)


class SmallDecoder(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        c, h, _ = spec.output_shape
        sizes = [h]
        for _ in spec.widths:
            sizes.append(_conv_out(sizes[-1]))
        widths = list(spec.widths)
        self.base = (widths[-1], sizes[-1])
        self.project = nn.Linear(spec.latent_dim, widths[-1] * sizes[-1] ** 2)
        layers = []
        outs = widths[-2::-1] + [c]
        for i, out_ch in enumerate(outs):
            in_size, target = sizes[-1 - i], sizes[-2 - i]
            layers.append(
                nn.ConvTranspose2d(
                    widths[-1 - i],
                    out_ch,
                    3,
                    stride=2,
                    padding=1,
                    output_padding=target - 2 * in_size + 1,
                    bias=(i == len(outs) - 1),
                )
            )
            if i < len(outs) - 1:
                layers += [nn.BatchNorm2d(out_ch), nn.LeakyReLU(0.2)]
        layers.append(nn.Sigmoid())
        self.features = nn.Sequential(*layers)

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ShapeError(f"expected latents (*, {self.spec.latent_dim}), got {tuple(z.shape)}")
        ch, size = self.base
        return self.features(self.project(z).view(-1, ch, size, size))


class BasicBlock(nn.Module):
    def __init__(self, channels, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)
        self.relu = nn.ReLU()
        self.shortcut = nn.Identity()
        if stride != 1:
            self.shortcut = nn.Sequential(
                nn.Conv2d(channels, channels, 1, stride, bias=False), nn.BatchNorm2d(channels)
            )

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResNetEncoder(nn.Module):
    """ResNet-18 layout (2-2-2-2 basic blocks) with all stages 64 channels wide."""

    width = 64

    def __init__(self, spec):
        super().__init__()
        if spec.backbone != "resnet18_w64":
            raise InvalidInputError("ResNetEncoder needs backbone='resnet18_w64'")
        self.spec = spec
        c = spec.input_shape[0]
        w = self.width
        self.stem = nn.Sequential(
            nn.Conv2d(c, w, 7, 2, 3, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(),
            nn.MaxPool2d(3, 2, 1),
        )
        self.layers = nn.Sequential(
            BasicBlock(w), BasicBlock(w),
            BasicBlock(w, 2), BasicBlock(w),
            BasicBlock(w, 2), BasicBlock(w),
            BasicBlock(w, 2), BasicBlock(w),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(w, 2 * spec.latent_dim)

    def feature_map(self, x):
        return self.layers(self.stem(x))

    def forward(self, x):
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"expected input (*, {self.spec.input_shape}), got {tuple(x.shape)}"
            )
        h = self.pool(self.feature_map(x)).flatten(1)
        return _posterior(self.head(h), self.spec.log_var_bound)


class ResNetDecoder(nn.Module):
    """Mirror of ResNetEncoder: residual stages separated by 2x nearest upsampling."""

    width = 64
    seed_channels = 16

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        c, h, _ = spec.output_shape
        w = self.width
        self.base = h // 32
        self.project = nn.Linear(spec.latent_dim, self.seed_channels * self.base ** 2)
        up = lambda: nn.Upsample(scale_factor=2, mode="nearest")  # noqa: E731
        self.layers = nn.Sequential(
            nn.Conv2d(self.seed_channels, w, 1),
            BasicBlock(w), BasicBlock(w), up(),
            BasicBlock(w), BasicBlock(w), up(),
            BasicBlock(w), BasicBlock(w), up(),
            BasicBlock(w), BasicBlock(w), up(),
            nn.Conv2d(w, w, 3, 1, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(), up(),
            nn.Conv2d(w, c, 3, 1, 1),
            nn.Sigmoid(),
        )

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ShapeError(f"expected latents (*, {self.spec.latent_dim}), got {tuple(z.shape)}")
        seed = self.project(z).view(-1, self.seed_channels, self.base, self.base)
        return self.layers(seed)


def build_small_encoder(spec):
    return SmallEncoder(spec)


def build_small_decoder(spec):
    return SmallDecoder(spec)


def build_resnet_encoder(spec):
    return ResNetEncoder(spec)


def build_resnet_decoder(spec):
    return ResNetDecoder(spec)


_BUILDERS = {
    "small_conv": (build_small_encoder, build_small_decoder),
    "resnet18_w64": (build_resnet_encoder, build_resnet_decoder),
}


class RecodingVAE(nn.Module):
    """VAE whose reconstruction is passed back through the same encoder.

    There is exactly one encoder; :meth:`trace` calls it twice.
    """

    def __init__(self, enc_spec, dec_spec=None, js_impl="moment_matched"):
        super().__init__()
        dec_spec = dec_spec or DecoderSpec.mirror(enc_spec)
        if dec_spec.output_shape != enc_spec.input_shape:
            raise InvalidInputError("decoder output_shape must match encoder input_shape")
        if dec_spec.latent_dim != enc_spec.latent_dim:
            raise InvalidInputError("encoder and decoder latent_dim differ")
        build_enc, build_dec = _BUILDERS[enc_spec.backbone]
        self.enc_spec, self.dec_spec = enc_spec, dec_spec
        self.encoder = build_enc(enc_spec)
        self.decoder = build_dec(dec_spec)
        self.js_impl = js_impl

    @property
    def latent_dim(self):
        return self.enc_spec.latent_dim

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def trace(self, x, noise=None, generator=None, sample=True):
        """encode -> sample -> decode -> re-encode.

        With ``sample=False`` the posterior mean is decoded (inference path).
        """
        q1 = self.encode(x)
        if not sample:
            z = q1.mean
        else:
            if noise is None:
                noise = torch.randn(
                    q1.mean.shape, generator=generator, dtype=q1.mean.dtype, device=q1.mean.device
                )
            z = reparameterize(q1, noise)
        x_hat = self.decode(z)
        q2 = self.encode(x_hat)
        return ForwardTrace(x, q1, x_hat, q2)

    def forward(self, x):
        return self.trace(x, sample=self.training)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path_or_file, model, config=None, epoch=0, extra=None):
    """Write a single-file checkpoint.

    The archive is a flat ``dict`` of ``str -> Tensor`` (``model.<param>``
    entries from ``state_dict``) plus a ``meta`` entry holding a JSON string
    with the specs, run config snapshot, and epoch counter.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "encoder_spec": model.enc_spec.to_dict(),
        "decoder_spec": model.dec_spec.to_dict(),
        "js_impl": model.js_impl,
        "config": config,
        "epoch": int(epoch),
        "extra": extra or {},
    }
    payload = {f"model.{k}": v.detach().cpu().clone() for k, v in model.state_dict().items()}
    payload["meta"] = json.dumps(meta, sort_keys=True)
    torch.save(payload, path_or_file)


def load_checkpoint(path_or_file):
    """Inverse of :func:`save_checkpoint`; returns ``(model, meta)`` in eval mode."""
    if isinstance(path_or_file, (bytes, bytearray)):
        path_or_file = io.BytesIO(path_or_file)
    payload = torch.load(path_or_file, map_location="cpu", weights_only=True)
    meta = json.loads(payload.pop("meta"))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"unrecognized checkpoint format {meta.get('format')!r}")
    enc = EncoderSpec(**meta["encoder_spec"])
    dec = DecoderSpec(**meta["decoder_spec"])
    model = RecodingVAE(enc, dec, js_impl=meta.get("js_impl", "moment_matched"))
    state = {k[len("model."):]: v for k, v in payload.items()}
    dtype = next(v.dtype for v in state.values() if v.is_floating_point())
    model.to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, meta

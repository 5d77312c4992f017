"""Compact encoder-decoder segmentation network.

Four-conv encoder (stride-2 from the second conv, so spatial dims shrink
by 8x) and a mirrored decoder that alternates bilinear upsampling with
3x3 convs back to full resolution, ending in a 1x1 classifier. Around
50k parameters at the default width, which keeps full-gradient checks
and CPU training cheap.

Feature taps exposed by ``forward``:

* ``low``    - encoder output before any decoding (coarsest grid),
* ``high``   - output of the last 3x3 conv before the classifier,
* ``decision`` - the per-pixel feature vectors used for prototype
  computations; same tensor as ``high`` here since the classifier is the
  only layer after it.

Auxiliary decoders (used only during adaptation) are structural copies
of the main decoder fed a channel-dropout view of the encoder output;
they never influence the main prediction path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    bilinear_upsample,
    conv2d,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
)
from .exceptions import ConfigError, DataError, NumericalError
from .rng import derive_seed, generator

DOWNSAMPLE_FACTOR = 8  # three stride-2 convs


@dataclass(frozen=True)
class SegNetConfig:
    """Architecture hyperparameters.

    class channels double per encoder block: base, 2*base, 4*base, 8*base.
    ``aux_decoders`` may be 0 for networks that never run the perturbed
    decoders (pretrained teachers, distilled students).
    """

    num_classes: int
    in_channels: int = 1
    base_channels: int = 8
    encoder_blocks: int = 4
    aux_decoders: int = 4
    dropout_rate: float = 0.5
    proj_channels: int = 32

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.encoder_blocks != 4:
            raise ConfigError("encoder_blocks must be 4 (feature taps assume it)")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.aux_decoders < 0:
            raise ConfigError("aux_decoders must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def encoder_channels(self) -> tuple[int, int, int, int]:
        b = self.base_channels
        return (b, 2 * b, 4 * b, 8 * b)

    @property
    def head_channels(self) -> int:
        return 2 * self.base_channels


@dataclass(frozen=True)
class FeatureTaps:
    low: Tensor
    high: Tensor
    decision: Tensor


def _decoder_shapes(config: SegNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    c1, c2, c3, c4 = config.encoder_channels
    head = config.head_channels
    return [
        ("up1.w", (c3, c4, 3, 3)),
        ("up1.b", (c3,)),
        ("up2.w", (c2, c3, 3, 3)),
        ("up2.b", (c2,)),
        ("head.w", (head, c2, 3, 3)),
        ("head.b", (head,)),
        ("cls.w", (config.num_classes, head, 1, 1)),
        ("cls.b", (config.num_classes,)),
    ]


def _parameter_shapes(config: SegNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    c1, c2, c3, c4 = config.encoder_channels
    shapes = [
        ("enc1.w", (c1, config.in_channels, 3, 3)),
        ("enc1.b", (c1,)),
        ("enc2.w", (c2, c1, 3, 3)),
        ("enc2.b", (c2,)),
        ("enc3.w", (c3, c2, 3, 3)),
        ("enc3.b", (c3,)),
        ("enc4.w", (c4, c3, 3, 3)),
        ("enc4.b", (c4,)),
    ]
    shapes += [(f"main.{n}", s) for n, s in _decoder_shapes(config)]
    for k in range(config.aux_decoders):
        shapes += [(f"aux{k}.{n}", s) for n, s in _decoder_shapes(config)]
    return shapes


def he_init(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """He-normal weights for convs (fan-in scaled), zeros for biases."""
    if len(shape) == 1:
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class SegNet:
    """Parameter container plus the forward passes."""

    def __init__(self, config: SegNetConfig, class_binding, params: dict[str, Parameter]):
        binding = tuple(int(c) for c in class_binding)
        if len(binding) != config.num_classes:
            raise ConfigError(
                f"class binding length {len(binding)} != num_classes {config.num_classes}"
            )
        if binding[0] != 0:
            raise ConfigError("class binding must start with background id 0")
        if sorted(set(binding)) != sorted(binding):
            raise ConfigError("class binding must not repeat ids")
        self.config = config
        self.class_binding = binding
        self.params = params

    # -- parameter plumbing ---------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def main_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if not n.startswith("aux")]

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def copy(self, *, drop_aux: bool = False) -> "SegNet":
        cfg = replace(self.config, aux_decoders=0) if drop_aux else self.config
        params = {
            n: Parameter(n, p.data.copy())
            for n, p in self.params.items()
            if not (drop_aux and n.startswith("aux"))
        }
        return SegNet(cfg, self.class_binding, params)

    @property
    def foreground_classes(self) -> tuple[int, ...]:
        return self.class_binding[1:]

    # -- forward passes -------------------------------------------------------

    def _check_input(self, image) -> Tensor:
        t = image if isinstance(image, Tensor) else Tensor(image)
        if t.ndim not in (3, 4):
            raise DataError(f"image must be [C,H,W] or [N,C,H,W], got shape {t.shape}")
        c = t.shape[-3]
        if c != self.config.in_channels:
            raise DataError(f"expected {self.config.in_channels} channel(s), got {c}")
        h, w = t.shape[-2], t.shape[-1]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise DataError(
                f"spatial dims {h}x{w} must be divisible by {DOWNSAMPLE_FACTOR}; "
                f"pad to {-(-h // DOWNSAMPLE_FACTOR) * DOWNSAMPLE_FACTOR}"
                f"x{-(-w // DOWNSAMPLE_FACTOR) * DOWNSAMPLE_FACTOR}"
            )
        if not np.all(np.isfinite(t.data)):
            raise DataError("image contains non-finite values")
        return t

    def _conv(self, x: Tensor, name: str, padding: int, stride: int = 1) -> Tensor:
        w = self.params[f"{name}.w"]
        b = self.params[f"{name}.b"]
        out = conv2d(x, w.tensor, padding=padding, stride=stride)
        return add(out, reshape(b.tensor, (b.data.shape[0], 1, 1)))

    def _encode(self, x: Tensor) -> Tensor:
        e = relu(self._conv(x, "enc1", padding=1))
        e = relu(self._conv(e, "enc2", padding=1, stride=2))
        e = relu(self._conv(e, "enc3", padding=1, stride=2))
        e = relu(self._conv(e, "enc4", padding=1, stride=2))
        return e

    def _decode(self, feat: Tensor, prefix: str) -> tuple[Tensor, Tensor]:
        h, w = feat.shape[-2], feat.shape[-1]
        d = bilinear_upsample(feat, (2 * h, 2 * w))
        d = relu(self._conv(d, f"{prefix}.up1", padding=1))
        d = bilinear_upsample(d, (4 * h, 4 * w))
        d = relu(self._conv(d, f"{prefix}.up2", padding=1))
        d = bilinear_upsample(d, (8 * h, 8 * w))
        head = relu(self._conv(d, f"{prefix}.head", padding=1))
        logits = self._conv(head, f"{prefix}.cls", padding=0)
        return logits, head

    def forward(self, image) -> tuple[Tensor, FeatureTaps]:
        """Full-resolution logits plus the three feature taps."""
        x = self._check_input(image)
        encoded = self._encode(x)
        logits, head = self._decode(encoded, "main")
        if not np.all(np.isfinite(logits.data)):
            raise NumericalError("non-finite logits in forward pass")
        return logits, FeatureTaps(low=encoded, high=head, decision=head)

    def forward_with_aux(
        self, image, dropout_seed: int
    ) -> tuple[Tensor, list[Tensor], FeatureTaps]:
        """Main probability map plus one map per auxiliary decoder.

        Each auxiliary decoder sees the shared encoder output through an
        independent channel-dropout mask drawn from ``dropout_seed`` (the
        main path is never perturbed). Returns softmax maps.
        """
        k = self.config.aux_decoders
        if k <= 0:
            raise ConfigError("network has no auxiliary decoders")
        x = self._check_input(image)
        encoded = self._encode(x)
        logits, head = self._decode(encoded, "main")
        if not np.all(np.isfinite(logits.data)):
            raise NumericalError("non-finite logits in forward pass")
        main = softmax(logits, axis=-3)
        n = encoded.shape[0] if encoded.ndim == 4 else 1
        channels = encoded.shape[-3]
        rate = self.config.dropout_rate
        aux_maps: list[Tensor] = []
        for j in range(k):
            rng = generator(derive_seed(dropout_seed, f"aux{j}"))
            keep = rng.random((n, channels)) >= rate
            if rate > 0.0:
                mask = keep / (1.0 - rate)
            else:
                mask = keep.astype(np.float64)
            mask = mask[:, :, None, None]
            if encoded.ndim == 3:
                mask = mask[0]
            perturbed = mul(encoded, Tensor(mask))
            aux_logits, _ = self._decode(perturbed, f"aux{j}")
            aux_maps.append(softmax(aux_logits, axis=-3))
        return main, aux_maps, FeatureTaps(low=encoded, high=head, decision=head)

    def decision_features(self, image) -> np.ndarray:
        """Per-pixel feature vectors at logit resolution (no graph)."""
        with no_grad():
            _, taps = self.forward(image)
        return taps.decision.data

    # -- inference conveniences ----------------------------------------------

    def predict_proba(self, images: np.ndarray, chunk: int = 16) -> np.ndarray:
        """Softmax maps [N, C, H, W] for an image stack, without autodiff."""
        stack = np.asarray(images, dtype=np.float64)
        if stack.ndim == 3:
            stack = stack[None]
        outs = []
        with no_grad():
            for start in range(0, len(stack), chunk):
                logits, _ = self.forward(stack[start : start + chunk])
                outs.append(softmax(logits, axis=-3).data)
        return np.concatenate(outs, axis=0)

    def predict(self, images: np.ndarray, chunk: int = 16) -> np.ndarray:
        """Label maps [N, H, W] in the network's bound (global) class ids."""
        proba = self.predict_proba(images, chunk=chunk)
        binding = np.asarray(self.class_binding)
        return binding[proba.argmax(axis=1)]


def init_network(config: SegNetConfig, seed: int, class_binding=None) -> SegNet:
    """Build a SegNet with He-initialized convs and zero biases.

    ``class_binding`` maps local channel index to global class id; defaults
    to (0, 1, ..., num_classes-1).
    """
    if class_binding is None:
        class_binding = tuple(range(config.num_classes))
    rng = generator(derive_seed(seed, "segnet-init"))
    params: dict[str, Parameter] = {}
    for name, shape in _parameter_shapes(config):
        params[name] = Parameter(name, he_init(name, shape, rng))
    return SegNet(config, class_binding, params)


def attach_fresh_aux(net: SegNet, aux_decoders: int, seed: int) -> SegNet:
    """Copy of ``net`` with ``aux_decoders`` newly initialized aux decoders.

    Encoder/decoder/classifier weights are copied verbatim; any existing
    aux decoders are replaced.
    """
    cfg = replace(net.config, aux_decoders=aux_decoders)
    rng = generator(derive_seed(seed, "aux-init"))
    params: dict[str, Parameter] = {}
    for name, shape in _parameter_shapes(cfg):
        if name in net.params and not name.startswith("aux"):
            params[name] = Parameter(name, net.params[name].data.copy())
        else:
            params[name] = Parameter(name, he_init(name, shape, rng))
    return SegNet(cfg, net.class_binding, params)

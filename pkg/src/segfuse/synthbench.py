"""Synthetic multi-domain abdominal phantom benchmark.

Renders 96x96 single-channel "scans" of three organ-like structures on a
dark background.  Every domain shares the same anatomy distribution; domains
differ only in appearance (tissue intensity levels, multiplicative bias
field, additive noise).  Source domains are bright-organ, low-noise scans;
the target domain compresses tissue contrast and adds shading and noise so
that a network trained on any source degrades there measurably but not
hopelessly.

All randomness is drawn from the counter-based streams in :mod:`segfuse.rng`
and the final image is quantized to 1e-6, so datasets are bit-identical
across platforms for a fixed seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataError
from .rng import derive_seed, normal_block, uniform_block

IMAGE_SIZE = 96
ORGAN_CLASS_IDS = {"liver": 1, "spleen": 2, "kidney": 3}
ORGAN_ORDER = ("liver", "spleen", "kidney")

# train/val/test fractions by domain role; the last split absorbs remainders
SOURCE_SPLIT = (("train", 0.6), ("val", 0.1), ("test", 0.3))
TARGET_SPLIT = (("train", 0.7), ("test", 0.3))

_MAX_PLACEMENT_ATTEMPTS = 100
_GEOM_DRAWS = 32  # counter positions reserved per placement attempt
_MIN_ORGAN_FRACTION = 0.01
_MAX_ORGAN_FRACTION = 0.40
_BORDER_MARGIN = 2

_MANIFEST_VERSION = 1


@dataclass(frozen=True)
class TissueStyle:
    """Appearance of one tissue class: base level plus per-sample jitter.

    ``mean`` is the nominal intensity; each sample draws its actual tissue
    level uniformly from ``mean ± contrast``.  Within a sample the tissue is
    flat until the bias field and noise are applied.
    """

    mean: float
    contrast: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.mean <= 1.0:
            raise ConfigError(f"tissue mean {self.mean} outside [0, 1]")
        if not 0.0 <= self.contrast <= 0.5:
            raise ConfigError(f"tissue contrast {self.contrast} outside [0, 0.5]")


@dataclass(frozen=True)
class DomainSpec:
    """One imaging domain: which organs appear and how tissue renders."""

    name: str
    role: str  # "source" or "target", selects the split ratios
    organs: tuple[str, ...]
    tissues: dict[str, TissueStyle]
    noise_sigma: float
    bias_amplitude: float
    labeled: bool

    def __post_init__(self) -> None:
        if self.role not in ("source", "target"):
            raise ConfigError(f"unknown domain role {self.role!r}")
        for organ in self.organs:
            if organ not in ORGAN_CLASS_IDS:
                raise ConfigError(f"unknown organ {organ!r}")
        if len(set(self.organs)) != len(self.organs):
            raise ConfigError("duplicate organ in domain spec")
        missing = [t for t in ("background", *self.organs) if t not in self.tissues]
        if missing:
            raise ConfigError(f"missing tissue styles: {missing}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.bias_amplitude <= 0.5:
            raise ConfigError("bias_amplitude must be in [0, 0.5]")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # (1, H, W) float64 in [0, 1]
    truth: np.ndarray  # (H, W) uint8, full multi-class labels
    domain: str
    seed: int


@dataclass
class SynthDataset:
    spec: DomainSpec
    samples: list[Sample]
    splits: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.samples)

    def indices(self, split: str | None) -> tuple[int, ...]:
        if split is None:
            return tuple(range(self.n))
        if split not in self.splits:
            raise ConfigError(
                f"dataset has splits {sorted(self.splits)}, not {split!r}"
            )
        return self.splits[split]

    def images(self, split: str | None = None) -> np.ndarray:
        idx = self.indices(split)
        return np.stack([self.samples[i].image for i in idx])

    def labels(self, split: str | None = None) -> np.ndarray:
        idx = self.indices(split)
        return np.stack([self.samples[i].truth for i in idx])

    def seeds(self) -> tuple[int, ...]:
        return tuple(s.seed for s in self.samples)


def default_domain_specs() -> dict[str, DomainSpec]:
    """The benchmark's three source domains and one target domain.

    Every domain renders all three organs; which organ a teacher is trained
    on is decided at pretraining time by binarizing the labels.  The target
    keeps the background level of the sources but drags every organ's
    intensity toward it, so frozen source models systematically miss organ
    pixels there.  That under-segmentation is the domain gap the adaptation
    stage has to close.  Organ levels are spaced so that no organ in the
    target sits near a different organ's source-domain level, otherwise a
    single-organ model starts firing on the wrong structure.
    """
    organs = ORGAN_ORDER

    def styles(bg: float, liver: float, spleen: float, kidney: float) -> dict:
        return {
            "background": TissueStyle(bg, 0.03),
            "liver": TissueStyle(liver, 0.03),
            "spleen": TissueStyle(spleen, 0.03),
            "kidney": TissueStyle(kidney, 0.03),
        }

    return {
        "source_liver": DomainSpec(
            name="source_liver",
            role="source",
            organs=organs,
            tissues=styles(0.26, 0.68, 0.84, 0.50),
            noise_sigma=0.020,
            bias_amplitude=0.05,
            labeled=True,
        ),
        "source_spleen": DomainSpec(
            name="source_spleen",
            role="source",
            organs=organs,
            tissues=styles(0.25, 0.66, 0.86, 0.52),
            noise_sigma=0.025,
            bias_amplitude=0.04,
            labeled=True,
        ),
        "source_kidney": DomainSpec(
            name="source_kidney",
            role="source",
            organs=organs,
            tissues=styles(0.24, 0.67, 0.83, 0.48),
            noise_sigma=0.018,
            bias_amplitude=0.06,
            labeled=True,
        ),
        "target": DomainSpec(
            name="target",
            role="target",
            organs=organs,
            tissues=styles(0.24, 0.57, 0.72, 0.38),
            noise_sigma=0.030,
            bias_amplitude=0.03,
            labeled=False,
        ),
    }


def _grid() -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.meshgrid(
        np.arange(IMAGE_SIZE, dtype=np.float64),
        np.arange(IMAGE_SIZE, dtype=np.float64),
        indexing="ij",
    )
    return yy, xx


def _span(u: np.float64, lo: float, hi: float) -> float:
    return float(lo + (hi - lo) * u)


def _wobbled_ellipse(
    yy, xx, cy, cx, a, b, theta, w1, p1, w2, p2
) -> np.ndarray:
    dy = yy - cy
    dx = xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    xr = dx * ct + dy * st
    yr = -dx * st + dy * ct
    r2 = (xr / a) ** 2 + (yr / b) ** 2
    phi = np.arctan2(yr, xr)
    f = 1.0 + w1 * np.cos(2.0 * phi + p1) + w2 * np.cos(3.0 * phi + p2)
    # quantize before thresholding so boundary pixels never depend on libm ulps
    return np.round(r2 - f * f, 9) <= 0.0


def _disk(yy, xx, cy, cx, r) -> np.ndarray:
    return np.round((yy - cy) ** 2 + (xx - cx) ** 2 - r * r, 9) <= 0.0


def _attempt_masks(yy, xx, u: np.ndarray) -> dict[str, np.ndarray]:
    """One placement attempt from a block of 32 uniforms."""
    liver = _wobbled_ellipse(
        yy,
        xx,
        cy=_span(u[0], 31.0, 41.0),
        cx=_span(u[1], 29.0, 39.0),
        a=_span(u[2], 15.0, 20.0),
        b=_span(u[3], 11.0, 16.0),
        theta=_span(u[4], 0.0, np.pi),
        w1=_span(u[5], 0.04, 0.10),
        p1=_span(u[6], 0.0, 2.0 * np.pi),
        w2=_span(u[7], 0.02, 0.07),
        p2=_span(u[8], 0.0, 2.0 * np.pi),
    )
    spleen = _wobbled_ellipse(
        yy,
        xx,
        cy=_span(u[9], 25.0, 35.0),
        cx=_span(u[10], 67.0, 77.0),
        a=_span(u[11], 7.0, 11.0),
        b=_span(u[12], 5.0, 8.0),
        theta=_span(u[13], 0.0, np.pi),
        w1=0.0,
        p1=0.0,
        w2=0.0,
        p2=0.0,
    )
    kidney = _disk(
        yy,
        xx,
        cy=_span(u[14], 63.0, 73.0),
        cx=_span(u[15], 25.0, 35.0),
        r=_span(u[16], 7.5, 10.0),
    ) | _disk(
        yy,
        xx,
        cy=_span(u[17], 63.0, 73.0),
        cx=_span(u[18], 57.0, 67.0),
        r=_span(u[19], 7.5, 10.0),
    )
    return {"liver": liver, "spleen": spleen, "kidney": kidney}


def _masks_valid(masks: dict[str, np.ndarray], organs: tuple[str, ...]) -> bool:
    total = IMAGE_SIZE * IMAGE_SIZE
    m = _BORDER_MARGIN
    chosen = [masks[o] for o in organs]
    for mask in chosen:
        frac = mask.sum() / total
        if not _MIN_ORGAN_FRACTION <= frac <= _MAX_ORGAN_FRACTION:
            return False
        if (
            mask[:m, :].any()
            or mask[-m:, :].any()
            or mask[:, :m].any()
            or mask[:, -m:].any()
        ):
            return False
    for i in range(len(chosen)):
        for j in range(i + 1, len(chosen)):
            if (chosen[i] & chosen[j]).any():
                return False
    return True


def generate_sample(spec: DomainSpec, seed: int) -> Sample:
    """Render one deterministic sample of ``spec`` for the given seed.

    Anatomy is derived from the seed alone, so two domains given the same
    seed produce identical label maps with different appearance.
    """
    yy, xx = _grid()
    geom_seed = derive_seed(seed, "anatomy")
    masks = None
    for attempt in range(_MAX_PLACEMENT_ATTEMPTS):
        u = uniform_block(geom_seed, attempt * _GEOM_DRAWS, _GEOM_DRAWS)
        candidate = _attempt_masks(yy, xx, u)
        if _masks_valid(candidate, spec.organs):
            masks = candidate
            break
    if masks is None:
        raise DataError(
            f"organ placement failed after {_MAX_PLACEMENT_ATTEMPTS} attempts "
            f"(domain {spec.name}, seed {seed})"
        )

    truth = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    for organ in spec.organs:
        truth[masks[organ]] = ORGAN_CLASS_IDS[organ]

    # one level draw per tissue in fixed order, rendered organs or not,
    # so the stream layout never depends on the organ subset
    lv = uniform_block(derive_seed(seed, "levels/" + spec.name), 0, 4)
    bg_style = spec.tissues["background"]
    image = np.full(
        (IMAGE_SIZE, IMAGE_SIZE),
        bg_style.mean + bg_style.contrast * (2.0 * lv[0] - 1.0),
    )
    for k, organ in enumerate(ORGAN_ORDER):
        if organ not in spec.organs:
            continue
        style = spec.tissues[organ]
        image[masks[organ]] = style.mean + style.contrast * (2.0 * lv[k + 1] - 1.0)

    if spec.bias_amplitude > 0:
        bu = uniform_block(derive_seed(seed, "bias/" + spec.name), 0, 12)
        acc = np.zeros_like(image)
        norm = 0.0
        for k in range(3):
            fy = _span(bu[4 * k], 0.5, 1.5)
            fx = _span(bu[4 * k + 1], 0.5, 1.5)
            phase = _span(bu[4 * k + 2], 0.0, 2.0 * np.pi)
            coeff = _span(bu[4 * k + 3], 0.5, 1.0)
            acc += coeff * np.cos(
                2.0 * np.pi * (fy * yy / IMAGE_SIZE + fx * xx / IMAGE_SIZE) + phase
            )
            norm += coeff
        image = image * (1.0 + spec.bias_amplitude * acc / norm)

    if spec.noise_sigma > 0:
        noise = normal_block(
            derive_seed(seed, "noise/" + spec.name), 0, IMAGE_SIZE * IMAGE_SIZE
        )
        image = image + spec.noise_sigma * noise.reshape(IMAGE_SIZE, IMAGE_SIZE)

    image = np.round(np.clip(image, 0.0, 1.0), 6)
    return Sample(image=image[None], truth=truth, domain=spec.name, seed=seed)


def split_indices(role: str, n: int) -> dict[str, tuple[int, ...]]:
    """Contiguous index splits for a dataset of ``n`` samples."""
    ratios = SOURCE_SPLIT if role == "source" else TARGET_SPLIT
    counts = [int(np.floor(frac * n)) for _, frac in ratios[:-1]]
    counts.append(n - sum(counts))
    out: dict[str, tuple[int, ...]] = {}
    start = 0
    for (name, _), count in zip(ratios, counts):
        out[name] = tuple(range(start, start + count))
        start += count
    return out


def generate_dataset(
    spec: DomainSpec,
    n: int,
    base_seed: int,
    split_counts: dict[str, int] | None = None,
) -> SynthDataset:
    """Generate samples for seeds base_seed .. base_seed + n - 1.

    ``split_counts`` overrides the role's default ratios with explicit
    per-split sample counts (must sum to ``n``).
    """
    if n < 10:
        raise ConfigError(f"datasets need at least 10 samples, got {n}")
    samples = [generate_sample(spec, base_seed + i) for i in range(n)]
    if split_counts is not None:
        if sum(split_counts.values()) != n:
            raise ConfigError(
                f"split counts {split_counts} do not sum to n={n}"
            )
        splits: dict[str, tuple[int, ...]] = {}
        start = 0
        for name, count in split_counts.items():
            splits[name] = tuple(range(start, start + count))
            start += count
    else:
        splits = split_indices(spec.role, n)
    return SynthDataset(spec=spec, samples=samples, splits=splits)


def dataset_digest(dataset: SynthDataset) -> str:
    """sha256 over every sample's seed, image bytes, and label bytes."""
    h = hashlib.sha256()
    for sample in dataset.samples:
        h.update(struct.pack("<q", sample.seed))
        h.update(np.ascontiguousarray(sample.image, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(sample.truth, dtype=np.uint8).tobytes())
    return h.hexdigest()


def _spec_to_dict(spec: DomainSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["organs"] = list(spec.organs)
    return d


def _spec_from_dict(d: dict) -> DomainSpec:
    tissues = {k: TissueStyle(**v) for k, v in d["tissues"].items()}
    return DomainSpec(
        name=d["name"],
        role=d["role"],
        organs=tuple(d["organs"]),
        tissues=tissues,
        noise_sigma=d["noise_sigma"],
        bias_amplitude=d["bias_amplitude"],
        labeled=d["labeled"],
    )


def save_dataset(dataset: SynthDataset, directory: str | Path) -> Path:
    """Persist as manifest.json + images.bin (f64 LE) + labels.bin (u8)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.ascontiguousarray(dataset.images(None), dtype="<f8")
    labels = np.ascontiguousarray(dataset.labels(None), dtype=np.uint8)
    manifest = {
        "format_version": _MANIFEST_VERSION,
        "kind": "synth-dataset",
        "domain": _spec_to_dict(dataset.spec),
        "n": dataset.n,
        "image_shape": list(images.shape[1:]),
        "seeds": list(dataset.seeds()),
        "splits": {k: list(v) for k, v in dataset.splits.items()},
        "digest": dataset_digest(dataset),
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    )
    (directory / "images.bin").write_bytes(images.tobytes())
    (directory / "labels.bin").write_bytes(labels.tobytes())
    return directory


def load_dataset(directory: str | Path) -> SynthDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != _MANIFEST_VERSION:
        raise DataError(
            f"unsupported dataset format_version {manifest.get('format_version')}"
        )
    if manifest.get("kind") != "synth-dataset":
        raise DataError(f"not a dataset directory: kind={manifest.get('kind')!r}")
    spec = _spec_from_dict(manifest["domain"])
    n = manifest["n"]
    shape = tuple(manifest["image_shape"])
    images = np.frombuffer(
        (directory / "images.bin").read_bytes(), dtype="<f8"
    ).reshape((n, *shape))
    labels = np.frombuffer(
        (directory / "labels.bin").read_bytes(), dtype=np.uint8
    ).reshape((n, shape[1], shape[2]))
    samples = [
        Sample(
            image=images[i].copy(),
            truth=labels[i].copy(),
            domain=spec.name,
            seed=manifest["seeds"][i],
        )
        for i in range(n)
    ]
    dataset = SynthDataset(
        spec=spec,
        samples=samples,
        splits={k: tuple(v) for k, v in manifest["splits"].items()},
    )
    if dataset_digest(dataset) != manifest["digest"]:
        raise DataError(f"dataset at {directory} does not match its digest")
    return dataset

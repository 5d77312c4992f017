"""Single-file network checkpoints.

Layout: one line of JSON (the manifest) terminated by a newline, followed by
the raw parameter payload as concatenated little-endian float64 values. The
manifest records the format version, a kind tag ("pretrained-teacher",
"adapted-teacher", "student"), the network architecture and class binding,
an optional fingerprint of the run configuration that produced the file,
optional optimizer moments, and one (name, shape, offset) entry per tensor.
Save then load restores every tensor bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Parameter
from .exceptions import ConfigError, DataError
from .network import SegNet, SegNetConfig, _parameter_shapes

FORMAT_VERSION = 1

CHECKPOINT_KINDS = ("pretrained-teacher", "adapted-teacher", "student")

# filesystem locations must not affect the fingerprint
_PATH_KEY_SUFFIXES = ("_dir", "_path", "_file")
_PATH_KEYS = {"out", "output", "dataset", "checkpoint", "checkpoints", "teacher", "teachers", "selection"}


def _strip_paths(value):
    if isinstance(value, dict):
        return {
            k: _strip_paths(v)
            for k, v in value.items()
            if k not in _PATH_KEYS and not k.endswith(_PATH_KEY_SUFFIXES)
        }
    if isinstance(value, (list, tuple)):
        return [_strip_paths(v) for v in value]
    return value


def config_fingerprint(config: dict) -> str:
    """Stable digest of a run configuration.

    Keys naming filesystem locations are dropped (recursively) before
    hashing, so two runs that differ only in where files live compare equal
    while any parameter change shows up.
    """
    canonical = json.dumps(
        _strip_paths(config), sort_keys=True, separators=(",", ":")
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class CheckpointBundle:
    net: SegNet
    manifest: dict
    optimizer: AdamState | None = None


def save_checkpoint(
    path,
    net: SegNet,
    kind: str,
    *,
    fingerprint: str | None = None,
    optimizer: AdamState | None = None,
    extra: dict | None = None,
) -> dict:
    """Write ``net`` (and optionally its optimizer moments) to ``path``.

    Returns the manifest that was written. Tensors are stored in sorted
    name order so identical networks always produce identical bytes.
    """
    if kind not in CHECKPOINT_KINDS:
        raise ConfigError(f"kind must be one of {CHECKPOINT_KINDS}, got {kind!r}")
    entries: list[dict] = []
    blobs: list[bytes] = []
    offset = 0

    def push(name: str, array: np.ndarray) -> None:
        nonlocal offset
        raw = np.ascontiguousarray(array, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(array.shape), "dtype": "<f8", "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)

    for name in sorted(net.params):
        push(name, net.params[name].data)
    opt_meta = None
    if optimizer is not None:
        for name in sorted(optimizer.m):
            push(f"adam.m.{name}", np.asarray(optimizer.m[name]))
        for name in sorted(optimizer.v):
            push(f"adam.v.{name}", np.asarray(optimizer.v[name]))
        opt_meta = {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "step": optimizer.step,
        }
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "network": asdict(net.config),
        "class_binding": list(net.class_binding),
        "fingerprint": fingerprint,
        "optimizer": opt_meta,
        "extra": extra or {},
        "tensors": entries,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)
    return manifest


def _read_tensor(payload: bytes, entry: dict) -> np.ndarray:
    shape = tuple(int(s) for s in entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = int(entry["offset"])
    end = start + count * 8
    if end > len(payload):
        raise DataError(
            f"checkpoint payload truncated: tensor {entry['name']} wants "
            f"bytes [{start}, {end}) of {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
    return flat.reshape(shape).astype(np.float64)


def load_checkpoint(
    path,
    *,
    expect_kind=None,
    expect_fingerprint: str | None = None,
) -> CheckpointBundle:
    """Restore a checkpoint written by save_checkpoint.

    ``expect_kind`` (a kind string or a tuple of them) and
    ``expect_fingerprint`` reject files from the wrong pipeline stage or a
    different run configuration before any tensor is touched.
    """
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise DataError(f"{path}: not a checkpoint (no manifest line)")
    try:
        manifest = json.loads(data[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DataError(f"{path}: manifest is not valid JSON ({err})") from None
    payload = data[newline + 1 :]

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(
            f"{path}: format version {version} not supported (expected {FORMAT_VERSION})"
        )
    kind = manifest.get("kind")
    if expect_kind is not None:
        wanted = (expect_kind,) if isinstance(expect_kind, str) else tuple(expect_kind)
        if kind not in wanted:
            raise ConfigError(
                f"{path}: checkpoint kind {kind!r} does not match expected {wanted}"
            )
    if expect_fingerprint is not None and manifest.get("fingerprint") != expect_fingerprint:
        raise ConfigError(
            f"{path}: checkpoint was produced by a different configuration "
            f"(fingerprint {manifest.get('fingerprint')!r} != {expect_fingerprint!r})"
        )

    config = SegNetConfig(**manifest["network"])
    expected = dict(_parameter_shapes(config))
    params: dict[str, Parameter] = {}
    moments_m: dict[str, np.ndarray] = {}
    moments_v: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        array = _read_tensor(payload, entry)
        if name.startswith("adam.m."):
            moments_m[name[len("adam.m.") :]] = array
        elif name.startswith("adam.v."):
            moments_v[name[len("adam.v.") :]] = array
        else:
            if name not in expected:
                raise DataError(f"{path}: unexpected tensor {name!r} for this architecture")
            if tuple(array.shape) != expected[name]:
                raise DataError(
                    f"{path}: tensor {name} has shape {tuple(array.shape)}, "
                    f"architecture wants {expected[name]}"
                )
            params[name] = Parameter(name, array)
    missing = set(expected) - set(params)
    if missing:
        raise DataError(f"{path}: checkpoint is missing tensors {sorted(missing)}")

    net = SegNet(config, tuple(manifest["class_binding"]), params)
    optimizer = None
    if manifest.get("optimizer") is not None:
        meta = manifest["optimizer"]
        optimizer = AdamState(
            lr=meta["lr"],
            beta1=meta["beta1"],
            beta2=meta["beta2"],
            eps=meta["eps"],
            step=meta["step"],
            m=moments_m,
            v=moments_v,
        )
    return CheckpointBundle(net=net, manifest=manifest, optimizer=optimizer)

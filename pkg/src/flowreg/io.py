"""Binary volume/flow containers, landmark CSV, and the run configuration.

Volume files: magic ``MVOL1``, three little-endian uint32 dims, then
float32 little-endian values in x-fastest order.  Flow files: magic
``MFLW1``, same header, three interleaved channels per voxel.  Round trips
are exact at single precision.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cascade import CascadeSpec, default_stages
from .exceptions import ConfigurationError, InvalidArgumentError
from .grid import FlowField, GridSpec, Volume
from .losses import EntropyConfig
from .metrics import LandmarkSet, SegmentationMask
from .synth import BSplineFieldSpec, PhantomSpec

VOLUME_MAGIC = b"MVOL1"
FLOW_MAGIC = b"MFLW1"
SCHEMA_VERSION = 1


def _write_binary(path, magic: bytes, dims, payload: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(np.asarray(dims, dtype="<u4").tobytes())
        fh.write(payload.astype("<f4").tobytes())


def _read_binary(path, magic: bytes, channels: int):
    raw = Path(path).read_bytes()
    if raw[:5] != magic:
        raise InvalidArgumentError(f"{path}: bad magic {raw[:5]!r}, expected {magic!r}")
    dims = tuple(int(d) for d in np.frombuffer(raw[5:17], dtype="<u4"))
    payload = np.frombuffer(raw[17:], dtype="<f4")
    expected = int(np.prod(dims)) * channels
    if payload.size != expected:
        raise InvalidArgumentError(
            f"{path}: payload has {payload.size} floats, expected {expected}"
        )
    return dims, payload.astype(np.float64)


def write_volume(path, v: Volume) -> None:
    # x-fastest: transpose so x varies quickest in the C-order ravel
    _write_binary(path, VOLUME_MAGIC, v.grid.dims, v.data.transpose(2, 1, 0).ravel())


def read_volume(path) -> Volume:
    dims, payload = _read_binary(path, VOLUME_MAGIC, 1)
    nx, ny, nz = dims
    return Volume(GridSpec(dims), payload.reshape(nz, ny, nx).transpose(2, 1, 0))


def write_flow(path, f: FlowField) -> None:
    _write_binary(path, FLOW_MAGIC, f.grid.dims, f.data.transpose(2, 1, 0, 3).ravel())


def read_flow(path) -> FlowField:
    dims, payload = _read_binary(path, FLOW_MAGIC, 3)
    nx, ny, nz = dims
    return FlowField(GridSpec(dims), payload.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3))


def write_mask(path, m: SegmentationMask) -> None:
    write_volume(path, Volume(m.grid, m.data.astype(np.float64)))


def read_mask(path) -> SegmentationMask:
    v = read_volume(path)
    return SegmentationMask(v.grid, v.data > 0.5)


def write_landmarks(path, lms: LandmarkSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "x", "y", "z"])
        for name, p in lms.points:
            writer.writerow([name, repr(float(p[0])), repr(float(p[1])), repr(float(p[2]))])


def read_landmarks(path) -> LandmarkSet:
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            points.append((row["name"], np.array([float(row[c]) for c in "xyz"])))
    return LandmarkSet(tuple(points))


# --------------------------------------------------------------------------
# Run configuration


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class RunConfig:
    cascade: CascadeSpec
    synthesis_phantom: PhantomSpec = field(default_factory=PhantomSpec)
    synthesis_flow: BSplineFieldSpec = field(default_factory=BSplineFieldSpec)
    ground_truth_flow: str | None = None
    histogram_match: bool = False


_CASCADE_KEYS = {
    "pattern",
    "stages",
    "iterations",
    "affine_lr",
    "dense_lr",
    "beta1",
    "beta2",
    "epsilon",
    "invertibility_weight",
    "similarity",
    "seed",
    "entropy",
}
_ENTROPY_KEYS = {"kernel_bandwidth", "sample_count", "rng_seed"}
_PHANTOM_KEYS = {
    "dims",
    "blob_count",
    "intensity_range",
    "rng_seed",
    "texture_count",
    "texture_amplitude",
    "texture_sigma",
}
_BSPLINE_KEYS = {"control_points", "max_displacement", "rng_seed"}
_TOP_KEYS = {
    "schema_version",
    "cascade",
    "phantom",
    "bspline",
    "ground_truth_flow",
    "histogram_match",
}


def _cascade_from_dict(doc: dict) -> CascadeSpec:
    _check_keys(doc, _CASCADE_KEYS, "cascade")
    kwargs = {
        k: doc[k]
        for k in (
            "iterations",
            "affine_lr",
            "dense_lr",
            "beta1",
            "beta2",
            "epsilon",
            "invertibility_weight",
            "similarity",
            "seed",
        )
        if k in doc
    }
    if "entropy" in doc:
        _check_keys(doc["entropy"], _ENTROPY_KEYS, "cascade.entropy")
        kwargs["entropy"] = EntropyConfig(**doc["entropy"])
    if "stages" in doc:
        raise ConfigurationError("explicit stage lists are not supported; use 'pattern'")
    pattern = doc.get("pattern", "ADD")
    return CascadeSpec(stages=default_stages(pattern), **kwargs)


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "config")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported schema_version {version}")
    cascade = _cascade_from_dict(doc.get("cascade", {}))
    phantom_doc = doc.get("phantom", {})
    _check_keys(phantom_doc, _PHANTOM_KEYS, "phantom")
    if "dims" in phantom_doc:
        phantom_doc = dict(phantom_doc, dims=tuple(phantom_doc["dims"]))
    for key in ("intensity_range", "texture_amplitude", "texture_sigma"):
        if key in phantom_doc:
            phantom_doc = dict(phantom_doc, **{key: tuple(phantom_doc[key])})
    bspline_doc = doc.get("bspline", {})
    _check_keys(bspline_doc, _BSPLINE_KEYS, "bspline")
    if "control_points" in bspline_doc:
        bspline_doc = dict(bspline_doc, control_points=tuple(bspline_doc["control_points"]))
    return RunConfig(
        cascade=cascade,
        synthesis_phantom=PhantomSpec(**phantom_doc),
        synthesis_flow=BSplineFieldSpec(**bspline_doc),
        ground_truth_flow=doc.get("ground_truth_flow"),
        histogram_match=bool(doc.get("histogram_match", False)),
    )


def default_config() -> RunConfig:
    return RunConfig(cascade=CascadeSpec(stages=default_stages("ADD")))


def default_config_dict() -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "cascade": {"pattern": "ADD"},
        "phantom": asdict(PhantomSpec()),
        "bspline": asdict(BSplineFieldSpec()),
    }

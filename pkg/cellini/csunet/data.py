"""
Persistence and synthetic data.

    CSUV volume     "CSUV" | version u32 | dtype u8 | C,D,H,W u32 | payload (little-endian, row-major)
    CSUC checkpoint "CSUC" | version u32 | config length u32 | config JSON
                    | record count u32 | records (name length u32, name, ndim u32, shape u32×ndim, f32 payload)
    manifest.json   {"samples": [{"id", "image", "mask", "fold", ...}], "screening": "..."}

Every write goes to a temporary file in the target directory which is then
renamed over the destination.
"""
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib     import Path
from typing      import BinaryIO, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from cellini.csunet.model  import CSUNet3D, build
from cellini.csunet.tensor import Tensor
from cellini.csunet.types  import DatasetManifest, NetworkConfig, PhantomSpec, VolumeRecord
from cellini.csunet.utils  import (
    BadMagic, ConfigMismatch, DuplicateSample, FormatError, MissingVolume, PhantomOutOfBounds,
    ShapeError, TruncatedPayload, UnknownDtype, UnsupportedVersion,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

VOLUME_MAGIC = b"CSUV"
CHECKPOINT_MAGIC = b"CSUC"
FORMAT_VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
VOLUME_HEADER = struct.Struct("<4sIB4I")
MANIFEST_NAME = "manifest.json"


def _atomic_write(path: PathLike, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: PathLike, payload: str):
    """ atomically write a JSON document (already serialised) """
    _atomic_write(path, (payload.rstrip("\n") + "\n").encode())
    logger.info("wrote %s", path)


def _read_exact(f: BinaryIO, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise TruncatedPayload(f"file ended inside the {what} ({len(data)} of {count} bytes)")
    return data


# volumes

def encode_volume(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim != 4:
        raise ShapeError(f"a volume must be (C,D,H,W), got shape {array.shape}")
    if array.dtype == np.uint8:
        code = 1
    elif np.issubdtype(array.dtype, np.floating):
        code = 0
    else:
        raise UnknownDtype(f"cannot store dtype {array.dtype} (float32 or uint8 expected)")
    payload = np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()
    return VOLUME_HEADER.pack(VOLUME_MAGIC, FORMAT_VERSION, code, *array.shape) + payload


def write_volume(path: PathLike, volume: Union[Tensor, np.ndarray]):
    """ write a single-sample (C,D,H,W) volume as CSUV """
    array = volume.data if isinstance(volume, Tensor) else volume
    _atomic_write(path, encode_volume(array))


def read_volume_header(f: BinaryIO) -> Tuple[np.dtype, Tuple[int, int, int, int]]:
    head = _read_exact(f, VOLUME_HEADER.size, "header")
    magic, version, code, *shape = VOLUME_HEADER.unpack(head)
    if magic != VOLUME_MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported volume version {version}")
    if code not in DTYPES:
        raise UnknownDtype(f"unknown dtype code {code}")
    return DTYPES[code], tuple(shape)


def read_array(path: PathLike) -> np.ndarray:
    """ read a CSUV volume keeping its stored dtype """
    with open(path, "rb") as f:
        dtype, shape = read_volume_header(f)
        count = int(np.prod(shape))
        payload = _read_exact(f, count * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def read_volume(path: PathLike) -> Tensor:
    """ read a CSUV volume as a Tensor """
    array = read_array(path)
    return Tensor(array, dtype=np.float32 if array.dtype == np.uint8 else array.dtype)


# phantoms

def generate_phantom(spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray]:
    """generate_phantom

    (image float32, mask uint8), both (1,E,E,E). The image is Gaussian noise plus
    `contrast` inside the sphere, tapered by a cosine over a one-voxel rim; the
    mask is 1 exactly where the distance to the centre is <= radius.
    """
    rng = np.random.default_rng(spec.seed)
    extent, radius = spec.extent, spec.nodule_radius_vox
    if spec.nodule_center is None:
        center = rng.uniform(radius, extent - 1 - radius, size=3)
    else:
        center = np.asarray(spec.nodule_center, dtype=np.float64)
    if np.any(center - radius < 0) or np.any(center + radius > extent - 1):
        raise PhantomOutOfBounds(f"sphere of radius {radius} at {tuple(center)} does not fit in {extent}³")

    grid = np.indices((extent,) * 3, dtype=np.float64)
    distance = np.sqrt(sum((grid[axis] - center[axis]) ** 2 for axis in range(3)))
    profile = np.where(distance <= radius, 1.0,
                       np.where(distance < radius + 1, 0.5 * (1 + np.cos(np.pi * (distance - radius))), 0.0))

    noise = rng.normal(0.0, spec.noise_sigma, size=(extent,) * 3)
    image = (noise + spec.contrast * profile).astype(np.float32)[None]
    mask = (distance <= radius).astype(np.uint8)[None]
    return image, mask


# manifests

@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    fold: Optional[int] = None


def _check_unique(manifest: DatasetManifest):
    seen = set()
    for record in manifest.samples:
        if record.id in seen:
            raise DuplicateSample(f"sample id '{record.id}' appears more than once")
        seen.add(record.id)


def write_manifest(directory: PathLike, manifest: DatasetManifest) -> Path:
    _check_unique(manifest)
    path = Path(directory) / MANIFEST_NAME
    _atomic_write(path, (manifest.model_dump_json(indent=2) + "\n").encode())
    logger.info("wrote manifest with %d samples to %s", len(manifest.samples), path)
    return path


def build_manifest(directory: PathLike, screening: str = "",
                   metadata: Optional[Dict[str, Dict]] = None) -> DatasetManifest:
    """build_manifest

    pairs every `<id>_image.csuv` with its `<id>_mask.csuv` under `directory`
    and writes `manifest.json`. `metadata` adds per-id fields (fold, contrast).
    """
    directory = Path(directory)
    metadata = metadata or {}
    records = []
    for image in sorted(directory.glob("*_image.csuv")):
        sample_id = image.name[: -len("_image.csuv")]
        mask = directory / f"{sample_id}_mask.csuv"
        if not mask.exists():
            raise MissingVolume(f"sample '{sample_id}' has no mask file {mask.name}")
        with open(image, "rb") as f:
            _, shape = read_volume_header(f)
        records.append(VolumeRecord(id=sample_id, image=image.name, mask=mask.name,
                                    extent=shape[-1], **metadata.get(sample_id, {})))
    manifest = DatasetManifest(samples=records, screening=screening)
    write_manifest(directory, manifest)
    return manifest


def load_manifest(path: PathLike) -> DatasetManifest:
    """load_manifest

    parse and validate a manifest; every referenced file must exist and carry a
    valid CSUV header.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = DatasetManifest.model_validate_json(path.read_text())
    _check_unique(manifest)
    for record in manifest.samples:
        for role in ("image", "mask"):
            file = path.parent / getattr(record, role)
            if not file.exists():
                raise MissingVolume(f"sample '{record.id}' references missing {role} file {file}")
            try:
                with open(file, "rb") as f:
                    read_volume_header(f)
            except FormatError as e:
                raise MissingVolume(f"sample '{record.id}' {role} file {file} is not a valid volume: {e}") from e
    return manifest


def load_dataset(path: PathLike) -> List[Sample]:
    path = Path(path)
    manifest = load_manifest(path)
    root = path if path.is_dir() else path.parent
    return [Sample(record.id, read_array(root / record.image), read_array(root / record.mask), record.fold)
            for record in manifest.samples]


# checkpoints

def encode_checkpoint(net: CSUNet3D) -> bytes:
    config = net.config.model_dump_json().encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(config)), config,
             struct.pack("<I", len(net.registry))]
    for name, parameter in net.registry.items():
        encoded = name.encode()
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{parameter.ndim}I", parameter.ndim, *parameter.shape))
        parts.append(np.ascontiguousarray(parameter.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net: CSUNet3D, path: PathLike):
    _atomic_write(path, encode_checkpoint(net))
    logger.info("saved checkpoint with %d records to %s", len(net.registry), path)


def load_checkpoint(path: PathLike, config: Optional[NetworkConfig] = None) -> CSUNet3D:
    """load_checkpoint

    rebuild the network from the embedded configuration and restore every
    record. A given `config` must equal the embedded one.
    """
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise BadMagic(f"{path} is not a CSUC checkpoint")
        version, length = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != FORMAT_VERSION:
            raise UnsupportedVersion(f"unsupported checkpoint version {version}")
        try:
            stored = NetworkConfig.model_validate_json(_read_exact(f, length, "config"))
        except ValidationError as e:
            raise FormatError(f"checkpoint configuration is invalid: {e}") from e
        if config is not None and config != stored:
            raise ConfigMismatch(f"checkpoint was saved with a different network configuration: "
                                 f"{stored.model_dump()} != {config.model_dump()}")

        net = build(stored)
        (count,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
        if count != len(net.registry):
            raise ConfigMismatch(f"checkpoint holds {count} records, network has {len(net.registry)}")
        seen = set()
        for _ in range(count):
            (size,) = struct.unpack("<I", _read_exact(f, 4, "record name length"))
            try:
                name = _read_exact(f, size, "record name").decode()
            except UnicodeDecodeError as e:
                raise FormatError(f"checkpoint record name is not valid UTF-8: {e}") from e
            if name in seen:
                raise FormatError(f"checkpoint record '{name}' appears more than once")
            seen.add(name)
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, "record rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "record shape"))
            if name not in net.registry:
                raise ConfigMismatch(f"checkpoint record '{name}' is not a network parameter")
            parameter = net.registry[name]
            if tuple(shape) != parameter.shape:
                raise ShapeError(f"parameter '{name}' has shape {parameter.shape}, checkpoint holds {tuple(shape)}")
            payload = _read_exact(f, 4 * int(np.prod(shape, dtype=np.int64)), f"record '{name}'")
            parameter.data[...] = np.frombuffer(payload, dtype="<f4").reshape(shape)
        if f.read(1):
            raise FormatError(f"{path} has trailing bytes after the last record")
    return net

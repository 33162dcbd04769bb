"""Joint model container, deterministic initialization and the checkpoint format.

Checkpoint container (`.pckpt`):

    b"PCKPT1\\n"
    one JSON header line: {"version":1,"config":{...},"entries":[{"name","dtype","shape",
                           "offset","nbytes"}...],"meta":{...}}
    b"\\x00"
    raw little-endian arrays, concatenated in entry order
"""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np
import torch
import torch.nn as nn

from ..config import ExperimentConfig
from ..services.errors import ConfigError, DataFormatError
from .denoiser import Denoiser
from .revision import Revision
from .segmenter import Segmenter

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PCKPT1\n"
CHECKPOINT_VERSION = 1
GROUPS = ("denoiser", "revision", "segmenter")

_DTYPE_TAGS = {
    "f32le": np.dtype("<f4"),
    "f64le": np.dtype("<f8"),
    "i64le": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}
_TAG_OF = {np.dtype(v).str: k for k, v in _DTYPE_TAGS.items()}


class JointModel(nn.Module):
    """Denoiser, revision module and dual-branch segmenter trained as one."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        network = config.network
        self.denoiser = Denoiser(network)
        self.revision = Revision(network.revision_channels, config.diffusion.suv_cutoff)
        self.segmenter = Segmenter(network, config.roster.num_classes)

    def group_parameters(self, group: str) -> Iterator[nn.Parameter]:
        return getattr(self, group).parameters()


def init_params(config: ExperimentConfig, seed: int) -> JointModel:
    """Build a model whose initial weights depend only on (config, seed).

    Convolutions and linears keep torch's fan-in scaled default init; the
    revision output conv is zero and scan decays start near 0.5.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = JointModel(config)
    return model


class ModelParams(OrderedDict):
    """Named parameter tree: 'group/path' -> numpy array."""

    @classmethod
    def from_model(cls, model: nn.Module) -> "ModelParams":
        params = cls()
        for name, tensor in model.state_dict().items():
            group, _, rest = name.partition(".")
            params[f"{group}/{rest}"] = tensor.detach().cpu().numpy().copy()
        return params

    def load_into(self, model: nn.Module) -> None:
        state = {name.replace("/", ".", 1): torch.from_numpy(np.array(value)) for name, value in self.items()}
        missing, unexpected = model.load_state_dict(state, strict=False)
        if missing or unexpected:
            raise ConfigError(
                f"checkpoint does not match the network: missing {list(missing)[:3]}, "
                f"unexpected {list(unexpected)[:3]}",
                field="network",
            )

    def group(self, name: str) -> "ModelParams":
        return ModelParams((k, v) for k, v in self.items() if k.startswith(f"{name}/"))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values() if v.dtype.kind == "f")

    def same_as(self, other: "ModelParams") -> bool:
        return list(self) == list(other) and all(np.array_equal(self[k], other[k]) for k in self)


# =============================================================================
# CONTAINER
# =============================================================================


@dataclass
class Checkpoint:
    """Decoded checkpoint: experiment config, raw arrays and free-form metadata."""

    config: ExperimentConfig
    arrays: "OrderedDict[str, np.ndarray]"
    meta: dict[str, Any] = field(default_factory=dict)

    def params(self) -> ModelParams:
        return ModelParams((k[len("params/") :], v) for k, v in self.arrays.items() if k.startswith("params/"))

    def build_model(self) -> JointModel:
        model = JointModel(self.config)
        self.params().load_into(model)
        return model


def encode_checkpoint(
    config: ExperimentConfig, arrays: dict[str, np.ndarray], meta: Optional[dict[str, Any]] = None
) -> bytes:
    """Serialize arrays deterministically in insertion order."""
    entries = []
    payloads = []
    offset = 0
    for name, array in arrays.items():
        arr = np.asarray(array)
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tag = _TAG_OF.get(little.dtype.str)
        if tag is None:
            raise DataFormatError(f"unsupported dtype {arr.dtype} for '{name}'", field="dtype")
        raw = np.ascontiguousarray(little).tobytes(order="C")
        entries.append(
            {"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config.model_dump(mode="json"),
        "entries": entries,
        "meta": meta or {},
    }
    line = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8") + b"\n"
    return CHECKPOINT_MAGIC + line + b"\x00" + b"".join(payloads)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    """Parse checkpoint bytes.

    Raises:
        DataFormatError: bad magic, header, version or payload
    """
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataFormatError("bad magic, expected PCKPT1", field="magic")
    end = blob.find(b"\n", len(CHECKPOINT_MAGIC))
    if end < 0 or blob[end + 1 : end + 2] != b"\x00":
        raise DataFormatError("malformed checkpoint header", field="header")
    try:
        header = json.loads(blob[len(CHECKPOINT_MAGIC) : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"checkpoint header is not valid JSON: {e}", field="header") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {header.get('version')}", field="version")
    try:
        config = ExperimentConfig.model_validate(header["config"])
    except Exception as e:
        raise DataFormatError(f"checkpoint config is invalid: {e}", field="config") from e

    payload = blob[end + 2 :]
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for entry in header.get("entries", []):
        start, nbytes = entry["offset"], entry["nbytes"]
        if entry["dtype"] not in _DTYPE_TAGS or start + nbytes > len(payload):
            raise DataFormatError(f"entry '{entry['name']}' is corrupt", field="entries")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=_DTYPE_TAGS[entry["dtype"]])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(config=config, arrays=arrays, meta=header.get("meta", {}))


def save_checkpoint(
    path: Path,
    model: JointModel,
    config: ExperimentConfig,
    extra_arrays: Optional[dict[str, np.ndarray]] = None,
    meta: Optional[dict[str, Any]] = None,
) -> None:
    """Write model parameters (plus optional optimizer/RNG arrays) to `path`."""
    arrays: OrderedDict[str, np.ndarray] = OrderedDict(
        (f"params/{k}", v) for k, v in ModelParams.from_model(model).items()
    )
    arrays.update(extra_arrays or {})
    blob = encode_checkpoint(config, arrays, meta)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as e:
        raise DataFormatError(f"cannot write {path}: {e}", field="path") from e
    logger.info(f"Saved checkpoint {path}")


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}", field="path") from e
    return decode_checkpoint(blob)


def check_compatible(checkpoint: Checkpoint, config: ExperimentConfig) -> None:
    """A checkpoint only runs under the network, roster and diffusion settings it was trained with.

    Raises:
        ConfigError: any of those sections differ
    """
    for section in ("network", "diffusion"):
        if getattr(checkpoint.config, section) != getattr(config, section):
            raise ConfigError(f"checkpoint was trained with a different '{section}' section", field=section)
    if checkpoint.config.roster != config.roster:
        raise ConfigError("checkpoint was trained with a different class roster", field="phantom.organs")

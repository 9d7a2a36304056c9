"""Binary container for model checkpoints (RSBM) and adapter bundles (RSAD).

Layout: 4-byte magic, uint32 LE format version (currently 1), uint64 LE
header length, canonical JSON header (sorted keys, no whitespace), then the
payload of float32 little-endian tensor blobs, back to back in name order.
The header carries the config and a tensor table of {name, shape, offset,
nbytes} sorted by name with offsets relative to the payload start. Writes go
through a temp file in the target directory and an atomic rename.
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile

import numpy as np

from .adapters import (
    DELTA_BETA_SUFFIX, DELTA_GAMMA_SUFFIX, LORA_A_SUFFIX, LORA_B_SUFFIX,
    LoRAPair, NormDelta, ResAdapterBundle, trainable_param_count,
)
from .errors import ContainerError
from .tensor import Tensor
from .unet import UNetConfig, UNetModel, site_shapes

__all__ = [
    "MODEL_MAGIC", "BUNDLE_MAGIC", "FORMAT_VERSION",
    "save_model", "load_model", "save_bundle", "load_bundle", "inspect",
]

MODEL_MAGIC = b"RSBM"
BUNDLE_MAGIC = b"RSAD"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")  # magic, version, header length


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack(named: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f4")
        entries.append({
            "name": name,
            "shape": [int(d) for d in arr.shape],
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    return entries, b"".join(blobs)


def _atomic_write(path: str, blob: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".resolab-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_container(path: str, magic: bytes, header_obj: dict, payload: bytes) -> None:
    header = _canonical(header_obj)
    _atomic_write(path, _PREFIX.pack(magic, FORMAT_VERSION, len(header)) + header + payload)


def _read_container(path: str, expected_magic: bytes) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise ContainerError(f"{path}: truncated header (file is {len(raw)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != expected_magic:
        raise ContainerError(f"{path}: bad magic {magic!r}, expected {expected_magic.decode()!r}")
    if version > FORMAT_VERSION or version < 1:
        raise ContainerError(f"{path}: unsupported format version {version} (readers know <= {FORMAT_VERSION})")
    if len(raw) < _PREFIX.size + header_len:
        raise ContainerError(f"{path}: truncated header (declared {header_len} bytes)")
    try:
        header = json.loads(raw[_PREFIX.size : _PREFIX.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: malformed header JSON ({exc})") from None
    if not isinstance(header, dict) or "config" not in header or "tensors" not in header:
        raise ContainerError(f"{path}: header must carry 'config' and 'tensors'")
    return header, raw[_PREFIX.size + header_len :]


def _validate_table(path: str, table, payload: bytes) -> None:
    if not isinstance(table, list) or not all(isinstance(e, dict) for e in table):
        raise ContainerError(f"{path}: tensor table must be a list of records")
    names = [e.get("name") for e in table]
    if names != sorted(names) or len(set(names)) != len(names):
        raise ContainerError(f"{path}: tensor names must be unique and sorted")
    cursor = 0
    for e in table:
        shape = tuple(int(d) for d in e["shape"])
        nbytes = int(e["nbytes"])
        offset = int(e["offset"])
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise ContainerError(f"{path}: {e['name']}: nbytes {nbytes} contradicts shape {shape}")
        if offset < cursor:
            raise ContainerError(f"{path}: overlapping extents at {e['name']}")
        if offset > cursor:
            raise ContainerError(f"{path}: gap in payload before {e['name']}")
        cursor = offset + nbytes
    if len(payload) < cursor:
        raise ContainerError(f"{path}: truncated payload ({len(payload)} bytes, need {cursor})")
    if len(payload) > cursor:
        raise ContainerError(f"{path}: {len(payload) - cursor} trailing payload bytes")


def _unpack_tensor(payload: bytes, entry: dict) -> np.ndarray:
    shape = tuple(int(d) for d in entry["shape"])
    count = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(payload, dtype="<f4", count=count, offset=int(entry["offset"]))
    return arr.astype(np.float64).reshape(shape)


# ---------------------------------------------------------------------------
# models


def save_model(model: UNetModel, path: str) -> None:
    from dataclasses import asdict

    config = asdict(model.config)
    config["channel_mults"] = list(model.config.channel_mults)
    entries, payload = _pack({name: t.data for name, t in model.params.items()})
    _write_container(path, MODEL_MAGIC, {"config": config, "tensors": entries}, payload)


def load_model(path: str) -> UNetModel:
    header, payload = _read_container(path, MODEL_MAGIC)
    cfg_dict = dict(header["config"])
    if "channel_mults" in cfg_dict:
        cfg_dict["channel_mults"] = tuple(cfg_dict["channel_mults"])
    known = set(UNetConfig.__dataclass_fields__)
    unknown = set(cfg_dict) - known
    if unknown:
        raise ContainerError(f"{path}: unknown config key(s) {sorted(unknown)}")
    config = UNetConfig(**cfg_dict)
    expected = site_shapes(config)
    _validate_table(path, header["tensors"], payload)
    table = {e["name"]: e for e in header["tensors"]}
    unknown_sites = set(table) - set(expected)
    if unknown_sites:
        raise ContainerError(f"{path}: unknown site-path {sorted(unknown_sites)[0]!r}")
    missing = set(expected) - set(table)
    if missing:
        raise ContainerError(f"{path}: missing site-path {sorted(missing)[0]!r}")
    params = {}
    for name, entry in table.items():
        if tuple(entry["shape"]) != expected[name]:
            raise ContainerError(
                f"{path}: {name}: stored shape {tuple(entry['shape'])} != expected {expected[name]}"
            )
        params[name] = Tensor(_unpack_tensor(payload, entry), requires_grad=True)
    return UNetModel(config=config, params=params, frozen=set())


# ---------------------------------------------------------------------------
# adapter bundles

_ADAPTER_SUFFIXES = (LORA_A_SUFFIX, LORA_B_SUFFIX, DELTA_GAMMA_SUFFIX, DELTA_BETA_SUFFIX)
_LORA_SITE_RE = re.compile(r"^(down|up)\.\d+\.sampler\.conv\.weight$")
_DELTA_SITE_RE = re.compile(r"^(down\.\d+|mid|up\.\d+)\.res\.\d+\.norm[12]$")


def save_bundle(bundle: ResAdapterBundle, path: str) -> None:
    config = {
        "kind": "resadapter",
        "rank": int(bundle.conv_loras[0].rank) if bundle.conv_loras else 0,
        "alpha_r": float(bundle.alpha_r),
        "base_fingerprint": bundle.base_fingerprint,
    }
    entries, payload = _pack({name: t.data for name, t in bundle.named_tensors().items()})
    _write_container(path, BUNDLE_MAGIC, {"config": config, "tensors": entries}, payload)


def load_bundle(path: str) -> ResAdapterBundle:
    header, payload = _read_container(path, BUNDLE_MAGIC)
    config = header["config"]
    _validate_table(path, header["tensors"], payload)
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name = entry["name"]
        for suffix in _ADAPTER_SUFFIXES:
            if name.endswith(suffix):
                site = name[: -len(suffix)]
                if suffix in (LORA_A_SUFFIX, LORA_B_SUFFIX):
                    site_ok = bool(_LORA_SITE_RE.match(site))
                else:
                    site_ok = bool(_DELTA_SITE_RE.match(site))
                if not site_ok:
                    raise ContainerError(f"{path}: unknown site-path {name!r}")
                arrays[name] = _unpack_tensor(payload, entry)
                break
        else:
            raise ContainerError(f"{path}: unknown site-path {name!r}")

    rank = int(config.get("rank", 0))
    lora_sites = sorted({n[: -len(LORA_A_SUFFIX)] for n in arrays if n.endswith(LORA_A_SUFFIX)})
    pairs = []
    for site in lora_sites:
        a_name, b_name = site + LORA_A_SUFFIX, site + LORA_B_SUFFIX
        if b_name not in arrays:
            raise ContainerError(f"{path}: {site}: lora A present without B")
        a, b = arrays[a_name], arrays[b_name]
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != rank or b.shape[1] != rank:
            raise ContainerError(f"{path}: {site}: lora shapes {a.shape}/{b.shape} contradict rank {rank}")
        pairs.append(LoRAPair(site=site, a=Tensor(a, requires_grad=True),
                              b=Tensor(b, requires_grad=True), rank=rank))
    orphan_b = {n[: -len(LORA_B_SUFFIX)] for n in arrays if n.endswith(LORA_B_SUFFIX)} - set(lora_sites)
    if orphan_b:
        raise ContainerError(f"{path}: {sorted(orphan_b)[0]}: lora B present without A")

    delta_sites = sorted({n[: -len(DELTA_GAMMA_SUFFIX)] for n in arrays if n.endswith(DELTA_GAMMA_SUFFIX)})
    deltas = []
    for site in delta_sites:
        g_name, b_name = site + DELTA_GAMMA_SUFFIX, site + DELTA_BETA_SUFFIX
        if b_name not in arrays:
            raise ContainerError(f"{path}: {site}: delta gamma present without beta")
        dg, db = arrays[g_name], arrays[b_name]
        if dg.shape != db.shape or dg.ndim != 1:
            raise ContainerError(f"{path}: {site}: delta shapes {dg.shape}/{db.shape} inconsistent")
        deltas.append(NormDelta(site=site, dgamma=Tensor(dg, requires_grad=True),
                                dbeta=Tensor(db, requires_grad=True)))
    orphan_db = {n[: -len(DELTA_BETA_SUFFIX)] for n in arrays if n.endswith(DELTA_BETA_SUFFIX)} - set(delta_sites)
    if orphan_db:
        raise ContainerError(f"{path}: {sorted(orphan_db)[0]}: delta beta present without gamma")

    alpha = float(config.get("alpha_r", 1.0))
    fingerprint = str(config.get("base_fingerprint", ""))
    return ResAdapterBundle(conv_loras=pairs, norm_deltas=deltas, alpha_r=alpha,
                            base_fingerprint=fingerprint)


# ---------------------------------------------------------------------------
# inspection


def inspect(path: str) -> str:
    """Human-readable report for either container kind; raises on malformed files."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == MODEL_MAGIC:
        model = load_model(path)
        lines = [
            "kind: RSBM (base model checkpoint)",
            f"version: {FORMAT_VERSION}",
            f"tensors: {len(model.params)}",
            f"parameters: {sum(t.size for t in model.params.values())}",
            "sites:",
        ]
        lines += [f"  {name}  {list(model.params[name].shape)}" for name in sorted(model.params)]
        return "\n".join(lines)
    if magic == BUNDLE_MAGIC:
        bundle = load_bundle(path)
        named = bundle.named_tensors()
        lines = [
            "kind: RSAD (adapter bundle)",
            f"version: {FORMAT_VERSION}",
            f"tensors: {len(named)}",
            f"rank: {bundle.conv_loras[0].rank if bundle.conv_loras else 0}",
            f"alpha_r: {bundle.alpha_r}",
            f"base_fingerprint: {bundle.base_fingerprint}",
            f"trainable parameters: {trainable_param_count(bundle)}",
            "sites:",
        ]
        lines += [f"  {name}  {list(named[name].shape)}" for name in sorted(named)]
        return "\n".join(lines)
    raise ContainerError(f"{path}: bad magic {magic!r}, expected 'RSBM' or 'RSAD'")

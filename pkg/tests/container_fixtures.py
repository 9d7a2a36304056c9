"""Shared container fixtures: valid files plus every malformed-file mutation.

Each case is (name, mutate, pattern): ``mutate`` edits a freshly saved valid
file in place, and loading it afterwards must raise ContainerError whose
message matches ``pattern``.
"""

import json
import struct

import numpy as np

from resolab.adapters import attach_resadapter
from resolab.store import BUNDLE_MAGIC, MODEL_MAGIC
from resolab.unet import UNetConfig, build_unet

SMALL = UNetConfig(in_channels=1, base_channels=4, channel_mults=(1, 2),
                   num_res_blocks_per_level=1, groups=4, time_embed_dim=8,
                   num_classes=2)
PREFIX = struct.Struct("<4sIQ")


def small_model(seed=0):
    model = build_unet(SMALL, seed=seed)
    rng = np.random.default_rng(50 + seed)
    for t in model.params.values():
        t.data = 0.1 * rng.standard_normal(t.shape)
    return model


def small_bundle(model, seed=11):
    bundle = attach_resadapter(model, rank=2, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for t in bundle.named_tensors().values():
        t.data = 0.05 * rng.standard_normal(t.shape)
    return bundle


def read_parts(path):
    raw = path.read_bytes()
    magic, version, hlen = PREFIX.unpack_from(raw)
    header = json.loads(raw[PREFIX.size:PREFIX.size + hlen])
    return magic, version, header, raw[PREFIX.size + hlen:]


def write_parts(path, magic, version, header, payload):
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(PREFIX.pack(magic, version, len(blob)) + blob + payload)


def _edit(path, magic, fn):
    """Apply fn(header, payload) -> (header, payload) and rewrite the file."""
    _, version, header, payload = read_parts(path)
    header, payload = fn(header, payload)
    write_parts(path, magic, version, header, payload)


def drop_entry(path, magic, predicate):
    """Remove one table entry, compacting offsets and payload around it."""
    def fn(header, payload):
        idx = next(i for i, e in enumerate(header["tensors"]) if predicate(e["name"]))
        entry = header["tensors"].pop(idx)
        start, size = entry["offset"], entry["nbytes"]
        payload = payload[:start] + payload[start + size:]
        for e in header["tensors"]:
            if e["offset"] > start:
                e["offset"] -= size
        return header, payload
    _edit(path, magic, fn)


def shrink_entry(path, magic, suffix):
    """Drop the last element of a 1-D tensor, keeping the table consistent."""
    def fn(header, payload):
        entry = next(e for e in header["tensors"] if e["name"].endswith(suffix))
        start, old = entry["offset"], entry["nbytes"]
        entry["shape"] = [entry["shape"][0] - 1]
        entry["nbytes"] = old - 4
        payload = payload[:start + old - 4] + payload[start + old:]
        for e in header["tensors"]:
            if e["offset"] > start:
                e["offset"] -= 4
        return header, payload
    _edit(path, magic, fn)


def _swap_first_rows(path, magic):
    def fn(header, payload):
        header["tensors"][0], header["tensors"][1] = (
            header["tensors"][1], header["tensors"][0])
        return header, payload
    _edit(path, magic, fn)


def _rename(path, magic, old, new):
    def fn(header, payload):
        entry = next(e for e in header["tensors"] if e["name"] == old)
        entry["name"] = new
        return header, payload
    _edit(path, magic, fn)


def _patch_entry(path, magic, name, **changes):
    def fn(header, payload):
        entry = next(e for e in header["tensors"] if e["name"] == name)
        entry.update(changes)
        return header, payload
    _edit(path, magic, fn)


def _patch_config(path, magic, **changes):
    def fn(header, payload):
        header["config"].update(changes)
        return header, payload
    _edit(path, magic, fn)


# --- model-file mutations ---------------------------------------------------

def _m_truncate_prefix(path):
    path.write_bytes(b"RSBM\x01")


def _m_bad_magic(path):
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])


def _m_bump_version(path):
    _, version, header, payload = read_parts(path)
    write_parts(path, MODEL_MAGIC, version + 1, header, payload)


def _m_declare_long_header(path):
    raw = bytearray(path.read_bytes())
    raw[8:16] = struct.pack("<Q", len(raw) * 2)
    path.write_bytes(bytes(raw))


def _m_garbage_json(path):
    _, _, _, payload = read_parts(path)
    blob = b"{this is not json"
    path.write_bytes(PREFIX.pack(MODEL_MAGIC, 1, len(blob)) + blob + payload)


def _m_drop_tensors_key(path):
    def fn(header, payload):
        del header["tensors"]
        return header, payload
    _edit(path, MODEL_MAGIC, fn)


def _m_duplicate_name(path):
    def fn(header, payload):
        header["tensors"][1]["name"] = header["tensors"][0]["name"]
        return header, payload
    _edit(path, MODEL_MAGIC, fn)


def _m_nbytes_lie(path):
    def fn(header, payload):
        header["tensors"][0]["nbytes"] += 4
        return header, payload
    _edit(path, MODEL_MAGIC, fn)


def _m_overlap(path):
    def fn(header, payload):
        header["tensors"][1]["offset"] -= 4
        return header, payload
    _edit(path, MODEL_MAGIC, fn)


def _m_gap(path):
    def fn(header, payload):
        header["tensors"][1]["offset"] += 4
        return header, payload
    _edit(path, MODEL_MAGIC, fn)


def _m_truncate_payload(path):
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])


def _m_trailing_bytes(path):
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00")


def _m_missing_site(path):
    def fn(header, payload):
        dropped = header["tensors"].pop()  # last in sorted order
        return header, payload[:dropped["offset"]]
    _edit(path, MODEL_MAGIC, fn)


def _m_transpose_shape(path):
    def fn(header, payload):
        entry = next(e for e in header["tensors"] if e["name"] == "embed.class.weight")
        entry["shape"] = entry["shape"][::-1]
        return header, payload
    _edit(path, MODEL_MAGIC, fn)


MODEL_CASES = [
    ("truncated_prefix", _m_truncate_prefix, "truncated header"),
    ("bad_magic", _m_bad_magic, "bad magic"),
    ("unsupported_version", _m_bump_version, "unsupported format version"),
    ("declared_header_too_long", _m_declare_long_header, "truncated header"),
    ("malformed_json", _m_garbage_json, "malformed header JSON"),
    ("missing_required_keys", _m_drop_tensors_key, "must carry"),
    ("unsorted_names", lambda p: _swap_first_rows(p, MODEL_MAGIC), "unique and sorted"),
    ("duplicate_names", _m_duplicate_name, "unique and sorted"),
    ("nbytes_contradicts_shape", _m_nbytes_lie, "contradicts shape"),
    ("overlapping_extents", _m_overlap, "overlapping extents"),
    ("payload_gap", _m_gap, "gap in payload"),
    ("truncated_payload", _m_truncate_payload, "truncated payload"),
    ("trailing_payload", _m_trailing_bytes, "trailing payload"),
    ("unknown_config_key", lambda p: _patch_config(p, MODEL_MAGIC, zoom_factor=2),
     "unknown config key"),
    ("unknown_site", lambda p: _rename(p, MODEL_MAGIC, "embed.class.weight",
                                       "embed.claxx.weight"), "unknown site-path"),
    ("missing_site", _m_missing_site, "missing site-path"),
    ("shape_mismatch", _m_transpose_shape, "stored shape"),
]


# --- bundle-file mutations --------------------------------------------------

BUNDLE_CASES = [
    ("lora_a_without_b",
     lambda p: drop_entry(p, BUNDLE_MAGIC,
                          lambda n: n == "down.0.sampler.conv.weight.lora.B"),
     "A present without B"),
    ("lora_b_without_a",
     lambda p: drop_entry(p, BUNDLE_MAGIC,
                          lambda n: n == "down.0.sampler.conv.weight.lora.A"),
     "B present without A"),
    ("delta_gamma_without_beta",
     lambda p: drop_entry(p, BUNDLE_MAGIC, lambda n: n.endswith(".delta.beta")),
     "gamma present without beta"),
    ("delta_beta_without_gamma",
     lambda p: drop_entry(p, BUNDLE_MAGIC, lambda n: n.endswith(".delta.gamma")),
     "beta present without gamma"),
    ("rank_contradiction",
     lambda p: _patch_config(p, BUNDLE_MAGIC, rank=3), "contradict rank"),
    ("unknown_lora_site",
     lambda p: _rename(p, BUNDLE_MAGIC, "down.0.sampler.conv.weight.lora.A",
                       "down.0.sampler.conv.wei.lora.A"), "unknown site-path"),
    ("unknown_suffix",
     lambda p: _rename(p, BUNDLE_MAGIC,
                       sorted(e["name"] for e in read_parts(p)[2]["tensors"])[-1],
                       "zzz.weird"), "unknown site-path"),
    ("delta_shape_inconsistent",
     lambda p: shrink_entry(p, BUNDLE_MAGIC, ".delta.beta"), "inconsistent"),
]

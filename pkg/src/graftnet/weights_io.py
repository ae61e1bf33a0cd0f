"""Binary weight files and artifact persistence.

File layout (all integers little-endian):

    magic   4 bytes  b"GRFT"
    version u32
    count   u32                      number of records
    records, each:
        name_len u16, name UTF-8 bytes
        dtype    u8                  0 = float32 (the only defined code)
        rank     u8
        dims     rank x u32
        data     prod(dims) x f32 raw little-endian
    crc32   u32                      over every byte before it

Malformed files raise a distinct error per failure mode: ``BadMagicError``,
``UnsupportedVersionError``, ``ChecksumError``. The checksum is verified
before any record is parsed, so a flipped byte anywhere in the file surfaces
as ``ChecksumError`` rather than garbage weights.

JSON metadata (artifact provenance, branch descriptors) rides along inside
ordinary records under ``meta/`` names: the UTF-8 JSON bytes, space-padded to
a multiple of four, reinterpreted as raw float32 words. Nothing downstream
does arithmetic on those records, so the bytes round-trip exactly.
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .backbone import Branch, GraftedModel, TrunkWeights

MAGIC = b"GRFT"
VERSION = 1
DTYPE_F32 = 0


class WeightFormatError(ValueError):
    """Base class for malformed weight files."""


class BadMagicError(WeightFormatError):
    pass


class UnsupportedVersionError(WeightFormatError):
    pass


class ChecksumError(WeightFormatError):
    pass


# ---------------------------------------------------------------------------
# raw record layer


def _pack_record(name, arr):
    # asarray, not ascontiguousarray: the latter promotes rank-0 to rank-1
    # and the record would round-trip with the wrong shape
    arr = np.asarray(arr, dtype="<f4")
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise ValueError(f"record name too long ({len(encoded)} bytes): {name[:40]!r}...")
    parts = [struct.pack("<H", len(encoded)), encoded, struct.pack("<BB", DTYPE_F32, arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.tobytes())
    return b"".join(parts)


def save_weights(path, params):
    """Write a name -> float32 array mapping; records are sorted by name so
    identical contents always produce identical bytes."""
    names = sorted(params)
    if len(names) != len(set(names)):
        raise ValueError("duplicate record names")
    body = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name in names:
        body.append(_pack_record(name, params[name]))
    payload = b"".join(body)
    blob = payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)
    return blob


def load_weights(path):
    """Read a weight file back into a name -> float32 array mapping."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a GRFT weight file (magic {blob[:4]!r})")
    if len(blob) < 16:
        raise ChecksumError(f"{path}: truncated file ({len(blob)} bytes)")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: file version {version}, reader supports {VERSION}")
    stored = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"{path}: checksum mismatch (stored {stored:#010x}, computed {actual:#010x})")
    count = struct.unpack_from("<I", blob, 8)[0]
    out = {}
    offset = 12
    end = len(blob) - 4
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            dtype_code, rank = struct.unpack_from("<BB", blob, offset)
            offset += 2
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
        except struct.error as exc:
            raise ChecksumError(f"{path}: record table runs past end of file") from exc
        if dtype_code != DTYPE_F32:
            raise WeightFormatError(f"{path}: record {name!r} has unknown dtype code {dtype_code}")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * n
        if offset + nbytes > end:
            raise ChecksumError(f"{path}: record {name!r} data runs past end of file")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims).copy()
        offset += nbytes
        if name in out:
            raise WeightFormatError(f"{path}: duplicate record name {name!r}")
        out[name] = arr
    if offset != end:
        raise WeightFormatError(f"{path}: {end - offset} trailing bytes after last record")
    return out


# ---------------------------------------------------------------------------
# JSON metadata smuggled through float32 records


def encode_json_record(obj):
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    raw += b" " * (-len(raw) % 4)
    return np.frombuffer(raw, dtype="<f4").copy()


def decode_json_record(arr):
    raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return json.loads(raw.decode("utf-8"))


# ---------------------------------------------------------------------------
# artifact persistence


def save_trunk(path, trunk):
    records = dict(trunk.params)
    meta = {"kind": "trunk", "depth": trunk.depth, "fingerprint": trunk.fingerprint, "provenance": trunk.provenance}
    records["meta/trunk"] = encode_json_record(meta)
    return save_weights(path, records)


def load_trunk(path):
    records = load_weights(path)
    try:
        meta = decode_json_record(records.pop("meta/trunk"))
    except KeyError:
        raise WeightFormatError(f"{path}: missing meta/trunk record") from None
    trunk = TrunkWeights(depth=meta["depth"], params=records, provenance=meta["provenance"])
    if trunk.fingerprint != meta["fingerprint"]:
        raise WeightFormatError(
            f"{path}: trunk fingerprint {trunk.fingerprint} does not match recorded {meta['fingerprint']}"
        )
    return trunk


def _branch_meta(branch):
    return {
        "attribute": branch.attribute,
        "graft_point": branch.graft_point,
        "end_block": branch.end_block,
        "pooling": branch.pooling,
        "class_names": branch.class_names,
        "trunk_fingerprint": branch.trunk_fingerprint,
    }


def _branch_from_records(meta, params, head_w, head_b):
    return Branch(
        attribute=meta["attribute"],
        graft_point=meta["graft_point"],
        end_block=meta["end_block"],
        params=params,
        pooling=meta["pooling"],
        head_w=head_w,
        head_b=head_b,
        class_names=list(meta["class_names"]),
        trunk_fingerprint=meta["trunk_fingerprint"],
    )


def save_branch(path, branch):
    records = dict(branch.params)
    records["head/w"] = branch.head_w
    records["head/b"] = branch.head_b
    records["meta/branch"] = encode_json_record(_branch_meta(branch))
    return save_weights(path, records)


def load_branch(path):
    records = load_weights(path)
    try:
        meta = decode_json_record(records.pop("meta/branch"))
        head_w = records.pop("head/w")
        head_b = records.pop("head/b")
    except KeyError as exc:
        raise WeightFormatError(f"{path}: missing required record {exc}") from None
    return _branch_from_records(meta, records, head_w, head_b)


def save_composite(path, model):
    """One file holding the trunk and every attached branch of a composite."""
    records = {}
    for name, arr in model.trunk.params.items():
        records[f"trunk/{name}"] = arr
    branch_metas = []
    for attr in model.attributes:
        br = model.branches[attr]
        for name, arr in br.params.items():
            records[f"branch/{attr}/{name}"] = arr
        records[f"branch/{attr}/head/w"] = br.head_w
        records[f"branch/{attr}/head/b"] = br.head_b
        branch_metas.append(_branch_meta(br))
    meta = {
        "kind": "composite",
        "trunk": {
            "depth": model.trunk.depth,
            "fingerprint": model.trunk.fingerprint,
            "provenance": model.trunk.provenance,
        },
        "branches": branch_metas,
    }
    records["meta/composite"] = encode_json_record(meta)
    return save_weights(path, records)


def load_composite(path):
    records = load_weights(path)
    try:
        meta = decode_json_record(records.pop("meta/composite"))
    except KeyError:
        raise WeightFormatError(f"{path}: missing meta/composite record") from None
    trunk_params = {}
    per_branch = {}
    for name, arr in records.items():
        if name.startswith("trunk/"):
            trunk_params[name[len("trunk/") :]] = arr
        elif name.startswith("branch/"):
            _, attr, rest = name.split("/", 2)
            per_branch.setdefault(attr, {})[rest] = arr
        else:
            raise WeightFormatError(f"{path}: unexpected record {name!r} in composite file")
    trunk = TrunkWeights(
        depth=meta["trunk"]["depth"], params=trunk_params, provenance=meta["trunk"]["provenance"]
    )
    if trunk.fingerprint != meta["trunk"]["fingerprint"]:
        raise WeightFormatError(
            f"{path}: trunk fingerprint {trunk.fingerprint} does not match recorded {meta['trunk']['fingerprint']}"
        )
    branches = []
    for bmeta in meta["branches"]:
        blob = per_branch.pop(bmeta["attribute"], {})
        head_w = blob.pop("head/w")
        head_b = blob.pop("head/b")
        branches.append(_branch_from_records(bmeta, blob, head_w, head_b))
    if per_branch:
        raise WeightFormatError(f"{path}: branch records without metadata: {sorted(per_branch)}")
    return GraftedModel(trunk, branches)

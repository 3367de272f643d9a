"""Binary containers for checkpoints, keystores and datasets, plus config files.

Every container has the same layout::

    magic        8 bytes   (b"PNCKPT01", b"PNKEYS01" or b"PNDATA01")
    version      u32 LE
    manifest_len u64 LE
    manifest     canonical JSON (sorted keys, no whitespace), UTF-8
    payload      contiguous little-endian float32 tensors

The manifest's ``tensors`` list gives each tensor's name, shape, dtype and
byte offset/length relative to the payload start. Readers check that the
entries tile the payload without overlap and that nothing is missing.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .data import Dataset, TriggerSet
from .errors import FormatError, KeystoreError, UsageError
from .models import BRANCH_MARK, BranchParams, Model, ModelSpec, build_model
from .passport import LayerPassport, PassportBundle
from .autograd import Tensor

VERSION = 1
MAGIC_CHECKPOINT = b"PNCKPT01"
MAGIC_KEYSTORE = b"PNKEYS01"
MAGIC_DATASET = b"PNDATA01"
HEADER = struct.Struct("<8sIQ")
DTYPE = "<f4"


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


# -- generic container ----------------------------------------------------------


def pack(magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize ``tensors`` (in the given order) and ``meta`` into one blob."""
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": DTYPE, "offset": offset, "length": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = canonical_json({"meta": meta, "tensors": entries})
    return HEADER.pack(magic, VERSION, len(manifest)) + manifest + b"".join(chunks)


def unpack(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of :func:`pack`; raises :class:`FormatError` on any defect."""
    if len(blob) < HEADER.size:
        raise FormatError("file shorter than the header", len(blob))
    got_magic, version, mlen = HEADER.unpack_from(blob)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    start = HEADER.size
    if start + mlen > len(blob):
        raise FormatError(f"manifest of {mlen} bytes runs past end of file", len(blob))
    try:
        manifest = json.loads(blob[start : start + mlen].decode())
        entries = manifest["tensors"]
        meta = manifest["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}", start) from exc
    base = start + mlen
    payload = memoryview(blob)[base:]
    tensors, cursor = {}, 0
    for e in sorted(entries, key=lambda e: e["offset"]):
        off, length, shape = int(e["offset"]), int(e["length"]), tuple(e["shape"])
        if e.get("dtype") != DTYPE:
            raise FormatError(f"{e['name']}: unsupported dtype {e.get('dtype')!r}", start)
        if off < cursor:
            raise FormatError(f"{e['name']}: overlaps the previous tensor", base + off)
        if off != cursor:
            raise FormatError(f"{e['name']}: gap before tensor", base + cursor)
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{e['name']}: length {length} does not match shape {shape}", base + off)
        if off + length > len(payload):
            raise FormatError(f"{e['name']}: truncated payload", base + len(payload))
        tensors[e["name"]] = np.frombuffer(payload[off : off + length], dtype=DTYPE).reshape(shape).astype(np.float32)
        cursor = off + length
    if cursor != len(payload):
        raise FormatError(f"{len(payload) - cursor} trailing bytes after the last tensor", base + cursor)
    return meta, {e["name"]: tensors[e["name"]] for e in entries}


def _write(path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise UsageError(f"no such file: {path}") from exc


# -- checkpoints ----------------------------------------------------------------


def spec_fingerprint(spec: ModelSpec) -> str:
    """Hash of the architecture with the passport mask ignored."""
    d = spec.to_dict()
    d.pop("passport_mask")
    return hashlib.sha256(canonical_json(d)).hexdigest()


def checkpoint_bytes(model: Model, meta: dict | None = None) -> bytes:
    m = {
        "kind": "checkpoint",
        "spec": model.spec.to_dict(),
        "deployed": model.deployed,
        "seed": model.seed,
        "extra": meta or {},
    }
    if not model.deployed:
        m["config"] = model.config
    return pack(MAGIC_CHECKPOINT, m, model.state_dict())


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    _write(path, checkpoint_bytes(model, meta))


def load_checkpoint(path) -> Model:
    return checkpoint_from_bytes(_read(path))


def checkpoint_from_bytes(blob: bytes) -> Model:
    meta, tensors = unpack(blob, MAGIC_CHECKPOINT)
    try:
        spec = ModelSpec.from_dict(meta["spec"])
        deployed = bool(meta["deployed"])
        model = build_model(spec, None if deployed else meta.get("config"), int(meta["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad checkpoint manifest: {exc}", HEADER.size) from exc
    model.deployed = deployed
    try:
        model.load_state_dict(tensors)
    except KeystoreError as exc:
        raise FormatError(f"tensor directory does not match the spec: {exc}", HEADER.size) from exc
    return model


def checkpoint_meta(path) -> dict:
    return unpack(_read(path), MAGIC_CHECKPOINT)[0]


# -- keystores --------------------------------------------------------------------


def keystore_bytes(bundle: PassportBundle, branch: BranchParams, spec: ModelSpec | None = None) -> bytes:
    if sorted(bundle.layer_ids) != sorted(branch.layer_ids):
        raise KeystoreError(f"bundle layers {bundle.layer_ids} != branch layers {branch.layer_ids}")
    tensors: dict[str, np.ndarray] = {}
    for p, (g, b) in zip(bundle.passports, bundle.target_signs):
        k = f"keystore.layer{p.layer_id}."
        tensors[k + "p_gamma"] = p.p_gamma.data
        tensors[k + "p_beta"] = p.p_beta.data
        tensors[k + "sign_gamma"] = np.asarray(g, np.float32)
        tensors[k + "sign_beta"] = np.asarray(b, np.float32)
    for name in sorted(branch.tensors):
        tensors[name] = branch.tensors[name]
    meta = {
        "kind": "keystore",
        "owner_id": bundle.owner_id,
        "creation_seed": int(bundle.creation_seed),
        "config": branch.config,
        "layer_ids": [int(i) for i in bundle.layer_ids],
        "modes": [p.mode for p in bundle.passports],
        "branch_layer_ids": [int(i) for i in branch.layer_ids],
        "bundle_meta": bundle.meta,
        "spec_fingerprint": spec_fingerprint(spec) if spec is not None else None,
    }
    return pack(MAGIC_KEYSTORE, meta, tensors)


def save_keystore(bundle: PassportBundle, branch: BranchParams, path, spec: ModelSpec | None = None) -> None:
    _write(path, keystore_bytes(bundle, branch, spec))


def load_keystore(path, spec: ModelSpec | None = None) -> tuple[PassportBundle, BranchParams]:
    return keystore_from_bytes(_read(path), spec)


def keystore_from_bytes(blob: bytes, spec: ModelSpec | None = None) -> tuple[PassportBundle, BranchParams]:
    """Decode a keystore; with ``spec`` given, check it fits that architecture."""
    meta, tensors = unpack(blob, MAGIC_KEYSTORE)
    try:
        passports, signs = [], []
        for i, mode in zip(meta["layer_ids"], meta["modes"]):
            k = f"keystore.layer{i}."
            passports.append(LayerPassport(Tensor(tensors[k + "p_gamma"]), Tensor(tensors[k + "p_beta"]), int(i), mode))
            signs.append((tensors[k + "sign_gamma"].astype(np.int8), tensors[k + "sign_beta"].astype(np.int8)))
        bundle = PassportBundle(passports, signs, meta["owner_id"], int(meta["creation_seed"]), dict(meta["bundle_meta"]))
        branch = BranchParams(
            meta["config"],
            [int(i) for i in meta["branch_layer_ids"]],
            {n: a for n, a in tensors.items() if BRANCH_MARK in n},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad keystore manifest: {exc}", HEADER.size) from exc
    if spec is not None:
        check_keystore_fits(bundle, spec, meta.get("spec_fingerprint"))
    return bundle, branch


def check_keystore_fits(bundle: PassportBundle, spec: ModelSpec, fingerprint: str | None = None) -> None:
    norm_ids = spec.norm_layer_ids()
    bad = [i for i in bundle.layer_ids if i not in norm_ids]
    if bad:
        raise KeystoreError(f"keystore layer ids {bad} are not normalization layers of the model (have {norm_ids})")
    if fingerprint is not None and fingerprint != spec_fingerprint(spec):
        raise KeystoreError("keystore was made for a different architecture")
    shapes = spec.input_shapes()
    for p, (g, _) in zip(bundle.passports, bundle.target_signs):
        j = spec.precedent(p.layer_id)
        if tuple(p.p_gamma.shape) != tuple(shapes[j]) or g.size != shapes[p.layer_id][0]:
            raise KeystoreError(f"layer {p.layer_id}: passport shape does not fit the model")


# -- datasets -----------------------------------------------------------------------


def save_dataset(ds: Dataset, path, meta: dict | None = None) -> None:
    m = {"kind": "trigger" if isinstance(ds, TriggerSet) else "dataset", "num_classes": ds.num_classes, "split": ds.split, "extra": meta or {}}
    if isinstance(ds, TriggerSet):
        m["seed"] = ds.seed
    _write(path, pack(MAGIC_DATASET, m, {"X": ds.X, "y": ds.y.astype(np.float32)}))


def load_dataset(path) -> Dataset:
    meta, t = unpack(_read(path), MAGIC_DATASET)
    try:
        y = t["y"].astype(np.int64)
        if meta["kind"] == "trigger":
            return TriggerSet(t["X"], y, int(meta["num_classes"]), meta["split"], seed=int(meta["seed"]))
        return Dataset(t["X"], y, int(meta["num_classes"]), meta["split"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad dataset file: {exc}", HEADER.size) from exc


# -- config files -------------------------------------------------------------------


def parse_config(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"config line {n}: empty key")
        if key in out:
            raise UsageError(f"config line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce(value: str, kind: type):
    if kind is bool:
        v = value.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    try:
        return kind(value)
    except ValueError as exc:
        raise UsageError(f"cannot read {value!r} as {kind.__name__}") from exc


def load_config(path_or_text, schema: dict[str, tuple[type, object]]) -> dict:
    """Read a config file against ``schema`` (key -> (type, default)).

    Unknown keys are errors; missing keys take their defaults.
    """
    text = path_or_text
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "=" not in path_or_text):
        text = _read(path_or_text).decode()
    raw = parse_config(text)
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    return {k: (coerce(raw[k], kind) if k in raw else default) for k, (kind, default) in schema.items()}

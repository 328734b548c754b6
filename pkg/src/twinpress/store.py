"""Bit-exact serialization for checkpoints, hidden-state pair sets, and
reports.

One container format for everything:

    magic   "ADPT" (4 bytes)
    version u32 little-endian
    hlen    u64 little-endian
    header  UTF-8 JSON, hlen bytes (kind, dims, tensor names, payload hash,
            provenance, ...)
    records tensor records in header order:
        name_len u64 | name UTF-8 | dtype u8 (1=f32, 2=f64, 3=i8)
        rank u64 | dims rank*u64 | payload_len u64 | payload bytes
        (i8 only) scales f32 * rows

All multi-byte integers are little-endian; every length is explicit; the
loader never reads past a declared length and raises FormatError on any
structural violation. The header's payload_sha256 covers all record bytes, so
single-bit payload corruption is detected.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from typing import Iterable, Iterator, Optional

import numpy as np

from .assemble import LayerSlot, MixedModel
from .errors import FormatError, InputError
from .model import (CompressedLayerParams, HiddenStatePairSet, LayerParams,
                    Model, ModelDims)
from .quant import QuantizedLayerParams, QuantizedTensor

MAGIC = b"ADPT"
VERSION = 1

_DTYPE_TAGS = {"f32": 1, "f64": 2, "i8": 3}
_TAG_DTYPES = {1: "f32", 2: "f64", 3: "i8"}
_NP_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i8": np.dtype("i1")}
_MAX_RANK = 32

_HEADER_KEYS = {
    "checkpoint": {"kind", "format_version", "dims", "arch", "layers",
                   "provenance", "tensors", "payload_sha256"},
    "pairset": {"kind", "format_version", "layer_index", "num_samples", "d",
                "provenance", "tensors", "payload_sha256"},
    "report": {"kind", "format_version", "report", "provenance", "tensors",
               "payload_sha256"},
}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


# ---------------------------------------------------------------------------
# low-level writer / reader


class _ContainerWriter:
    """Streams tensor records to a spooled temp file, then emits
    magic + version + header + records. Record bytes are hashed as written."""

    def __init__(self):
        self._spool = tempfile.SpooledTemporaryFile(max_size=32 * 1024 * 1024)
        self._hash = hashlib.sha256()
        self.names: list[str] = []

    def _write(self, data: bytes):
        self._spool.write(data)
        self._hash.update(data)

    def add(self, name: str, array: np.ndarray, dtype: str,
            scales: Optional[np.ndarray] = None):
        if dtype not in _DTYPE_TAGS:
            raise FormatError(f"unknown dtype {dtype!r}")
        if (dtype == "i8") != (scales is not None):
            raise FormatError("i8 tensors require scales; others must not have them")
        arr = np.ascontiguousarray(array, dtype=_NP_DTYPES[dtype])
        name_bytes = name.encode("utf-8")
        self._write(struct.pack("<Q", len(name_bytes)))
        self._write(name_bytes)
        self._write(struct.pack("<B", _DTYPE_TAGS[dtype]))
        self._write(struct.pack("<Q", arr.ndim))
        for dim in arr.shape:
            self._write(struct.pack("<Q", dim))
        payload = arr.tobytes()
        self._write(struct.pack("<Q", len(payload)))
        self._write(payload)
        if dtype == "i8":
            rows = arr.shape[0] if arr.ndim else 0
            s = np.ascontiguousarray(scales, dtype=_NP_DTYPES["f32"])
            if s.shape != (rows,):
                raise FormatError(f"scales must have shape ({rows},)")
            self._write(s.tobytes())
        self.names.append(name)

    def finish(self, path: str, header: dict):
        header = dict(header)
        header["format_version"] = VERSION
        header["tensors"] = list(self.names)
        header["payload_sha256"] = self._hash.hexdigest()
        header_bytes = _canonical_json(header)
        tmp_path = f"{path}.tmp.{os.getpid()}"
        with open(tmp_path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            self._spool.seek(0)
            while True:
                chunk = self._spool.read(1 << 20)
                if not chunk:
                    break
                fh.write(chunk)
        self._spool.close()
        os.replace(tmp_path, path)


class _ContainerReader:
    """Validating, bounds-checked reader. Any structural problem raises
    FormatError; nothing is read past a declared length."""

    def __init__(self, path: str):
        self.path = path
        try:
            self._size = os.path.getsize(path)
            self._fh = open(path, "rb")
        except OSError as exc:
            raise FormatError(f"cannot open container: {exc}") from exc
        try:
            self.header = self._read_header()
        except FormatError:
            self._fh.close()
            raise

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _take(self, n: int, what: str) -> bytes:
        if n < 0 or self._fh.tell() + n > self._size:
            raise FormatError(f"truncated container while reading {what}")
        data = self._fh.read(n)
        if len(data) != n:
            raise FormatError(f"truncated container while reading {what}")
        return data

    def _u64(self, what: str) -> int:
        return struct.unpack("<Q", self._take(8, what))[0]

    def _read_header(self) -> dict:
        if self._take(4, "magic") != MAGIC:
            raise FormatError("bad magic; not a container file")
        version = struct.unpack("<I", self._take(4, "version"))[0]
        if version != VERSION:
            raise FormatError(f"unsupported format version {version}")
        hlen = self._u64("header length")
        raw = self._take(hlen, "header")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"header is not valid JSON: {exc}") from exc
        if not isinstance(header, dict):
            raise FormatError("header must be a JSON object")
        kind = header.get("kind")
        if kind not in _HEADER_KEYS:
            raise FormatError(f"unknown container kind {kind!r}")
        keys = set(header)
        expected = _HEADER_KEYS[kind]
        if keys != expected:
            raise FormatError(
                f"header keys mismatch for kind {kind!r}: "
                f"missing {sorted(expected - keys)}, unexpected {sorted(keys - expected)}")
        if header.get("format_version") != VERSION:
            raise FormatError("header format_version disagrees with container version")
        names = header["tensors"]
        if (not isinstance(names, list)
                or any(not isinstance(n, str) for n in names)
                or len(set(names)) != len(names)):
            raise FormatError("header tensor list must be unique strings")
        if not isinstance(header.get("payload_sha256"), str):
            raise FormatError("header missing payload hash")
        return header

    def iter_tensors(self, verify_hash: bool = True) -> Iterator[tuple[str, np.ndarray, str, Optional[np.ndarray]]]:
        """Yield (name, array, dtype, scales) records in file order,
        validating names against the header and (optionally) the payload hash
        once the final record is consumed."""
        digest = hashlib.sha256()

        def take(n, what):
            data = self._take(n, what)
            digest.update(data)
            return data

        for expected_name in self.header["tensors"]:
            name_len = struct.unpack("<Q", take(8, "tensor name length"))[0]
            if name_len > self._size:
                raise FormatError("tensor name length exceeds file size")
            try:
                name = take(name_len, "tensor name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(f"tensor name is not UTF-8: {exc}") from exc
            if name != expected_name:
                raise FormatError(
                    f"tensor order mismatch: expected {expected_name!r}, found {name!r}")
            tag = struct.unpack("<B", take(1, "dtype tag"))[0]
            if tag not in _TAG_DTYPES:
                raise FormatError(f"unknown dtype tag {tag} for tensor {name!r}")
            dtype = _TAG_DTYPES[tag]
            rank = struct.unpack("<Q", take(8, "tensor rank"))[0]
            if rank > _MAX_RANK:
                raise FormatError(f"tensor {name!r} rank {rank} exceeds cap {_MAX_RANK}")
            shape = tuple(struct.unpack("<Q", take(8, "tensor dim"))[0] for _ in range(rank))
            count = 1
            for dim in shape:
                if dim > self._size:
                    raise FormatError(f"tensor {name!r} dimension {dim} exceeds file size")
                count *= dim
            payload_len = struct.unpack("<Q", take(8, "payload length"))[0]
            itemsize = _NP_DTYPES[dtype].itemsize
            if payload_len != count * itemsize:
                raise FormatError(
                    f"tensor {name!r} payload length {payload_len} does not match "
                    f"shape {shape} at dtype {dtype}")
            payload = take(payload_len, f"payload of {name!r}")
            arr = np.frombuffer(payload, dtype=_NP_DTYPES[dtype]).reshape(shape).copy()
            scales = None
            if dtype == "i8":
                rows = shape[0] if rank else 0
                scales = np.frombuffer(take(4 * rows, f"scales of {name!r}"),
                                       dtype=_NP_DTYPES["f32"]).copy()
            yield name, arr, dtype, scales
        if self._fh.tell() != self._size:
            raise FormatError("trailing bytes after final tensor record")
        if verify_hash and digest.hexdigest() != self.header["payload_sha256"]:
            raise FormatError("payload hash mismatch; container is corrupt")

    def read_all(self) -> dict[str, tuple[np.ndarray, str, Optional[np.ndarray]]]:
        return {name: (arr, dtype, scales)
                for name, arr, dtype, scales in self.iter_tensors()}


# ---------------------------------------------------------------------------
# checkpoints

_ORIG_FIELDS = ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2", "b_q", "b_v", "b_o",
                "b_1", "b_2", "ln_g", "ln_b", "ln2_g", "ln2_b")
_COMP_FIELDS = ("w_q", "w_k", "w_v", "w_ot", "ff1_u", "ff1_v", "ff1_a",
                "ff1_b", "ff2_u", "ff2_v", "ff2_a", "ff2_b", "t_q", "b_o",
                "b_1", "b_2", "ln_g", "ln_b", "ln2_g", "ln2_b")


def save_checkpoint(model, path: str, dtype: str = "f32",
                    provenance: Optional[dict] = None):
    """Write a model or mixed model. Float tensors are stored at `dtype`
    (f32 by default); int8 slots keep their codes and scales losslessly."""
    if dtype not in ("f32", "f64"):
        raise InputError(f"checkpoint dtype must be f32 or f64, got {dtype!r}")
    mixed = model if isinstance(model, MixedModel) else MixedModel.from_model(model)
    writer = _ContainerWriter()
    writer.add("embedding", mixed.embedding, dtype)
    writer.add("readout/w", mixed.w_out, dtype)
    writer.add("readout/b", mixed.b_out, dtype)
    layer_meta = []
    for j, slot in enumerate(mixed.slots):
        meta = {"active": slot.active, "compressed": None}
        for name in _ORIG_FIELDS:
            arr = getattr(slot.original, name)
            if arr is not None:
                writer.add(f"layer{j}/orig/{name}", arr, dtype)
        lp = slot.compressed
        if lp is not None:
            quantized = isinstance(lp, QuantizedLayerParams)
            base = lp.dequantized() if quantized else lp
            meta["compressed"] = {
                "kind": "int8" if quantized else "plain",
                "r_a": base.r_a, "l_a": base.l_a,
                "r_f": base.r_f, "l_f": base.l_f,
            }
            for name in _COMP_FIELDS:
                arr = getattr(base, name)
                if arr is None:
                    continue
                key = f"layer{j}/comp/{name}"
                if quantized and name in lp.factors:
                    q = lp.factors[name]
                    writer.add(key, q.codes, "i8", scales=q.scales)
                else:
                    writer.add(key, arr, dtype)
        layer_meta.append(meta)
    arch_ref = mixed.slots[0].original if mixed.slots else None
    header = {
        "kind": "checkpoint",
        "dims": mixed.dims.to_dict(),
        "arch": {
            "activation": arch_ref.activation if arch_ref else "gelu",
            "ff_residual_pre_ln": bool(arch_ref.ff_residual_pre_ln) if arch_ref else False,
        },
        "layers": layer_meta,
        "provenance": provenance if provenance is not None else dict(mixed.provenance),
    }
    writer.finish(path, header)


def _f64(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=np.float64)


def load_checkpoint(path: str) -> MixedModel:
    """Load and validate a checkpoint. Float tensors are upcast to f64 for
    compute; structural problems raise FormatError."""
    with _ContainerReader(path) as reader:
        header = reader.header
        if header["kind"] != "checkpoint":
            raise FormatError(f"expected a checkpoint, found kind {header['kind']!r}")
        try:
            dims = ModelDims.from_dict(header["dims"])
            arch = header["arch"]
            activation = str(arch["activation"])
            pre_ln = bool(arch["ff_residual_pre_ln"])
            layer_meta = header["layers"]
            if not isinstance(layer_meta, list) or len(layer_meta) != dims.n_layers:
                raise FormatError("layer metadata count disagrees with dims")
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed checkpoint header: {exc}") from exc
        data = reader.read_all()

    def tensor(name, required=True):
        if name not in data:
            if required:
                raise FormatError(f"checkpoint missing tensor {name!r}")
            return None
        return _f64(data[name][0])

    def expect_shape(name, arr, shape):
        if arr.shape != shape:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")

    embedding = tensor("embedding")
    expect_shape("embedding", embedding, (dims.vocab, dims.d))
    w_out = tensor("readout/w")
    expect_shape("readout/w", w_out, (dims.vocab, dims.d))
    b_out = tensor("readout/b")
    expect_shape("readout/b", b_out, (dims.vocab,))

    slots = []
    for j, meta in enumerate(layer_meta):
        try:
            active = meta["active"]
            comp_meta = meta["compressed"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed layer {j} metadata: {exc}") from exc
        kwargs = {}
        for name in _ORIG_FIELDS:
            arr = tensor(f"layer{j}/orig/{name}", required=name in
                         ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2", "ln_g", "ln_b"))
            if arr is not None:
                kwargs[name] = arr
        try:
            original = LayerParams(n_heads=dims.n_heads, activation=activation,
                                   ff_residual_pre_ln=pre_ln, **kwargs)
        except Exception as exc:
            raise FormatError(f"invalid original layer {j}: {exc}") from exc
        compressed = None
        if comp_meta is not None:
            try:
                quantized = comp_meta["kind"] == "int8"
                ranks = {k: int(comp_meta[k]) for k in ("r_a", "l_a", "r_f", "l_f")}
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"malformed compressed metadata for layer {j}: {exc}") from exc
            try:
                from .quant import dequantize
                ckwargs = {}
                factors = {}
                for name in _COMP_FIELDS:
                    key = f"layer{j}/comp/{name}"
                    if key not in data:
                        continue
                    arr, dt, scales = data[key]
                    if dt == "i8":
                        q = QuantizedTensor(codes=arr, scales=scales)
                        factors[name] = q
                        ckwargs[name] = dequantize(q)
                    else:
                        ckwargs[name] = _f64(arr)
                compressed = CompressedLayerParams(
                    n_heads=dims.n_heads, d_h=dims.d_h, activation=activation,
                    ff_residual_pre_ln=pre_ln, **ranks, **ckwargs)
                if quantized:
                    if not factors:
                        raise FormatError(f"int8 layer {j} has no quantized tensors")
                    compressed = QuantizedLayerParams(base=compressed, factors=factors)
            except FormatError:
                raise
            except Exception as exc:
                raise FormatError(f"invalid compressed layer {j}: {exc}") from exc
        try:
            slots.append(LayerSlot(original=original, compressed=compressed, active=active))
        except Exception as exc:
            raise FormatError(f"invalid slot {j}: {exc}") from exc
    try:
        return MixedModel(dims=dims, embedding=embedding, w_out=w_out, b_out=b_out,
                          slots=tuple(slots), provenance=dict(header["provenance"]))
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"invalid checkpoint structure: {exc}") from exc


def checkpoint_hash(path: str) -> str:
    """The container's payload hash (stable artifact identity)."""
    with _ContainerReader(path) as reader:
        return reader.header["payload_sha256"]


# ---------------------------------------------------------------------------
# hidden-state pair sets


def save_pairs(pairset: HiddenStatePairSet, path: str, dtype: str = "f32"):
    save_pairs_stream(iter(pairset.pairs), pairset.layer_index, pairset.d,
                      path, provenance=pairset.provenance, dtype=dtype)


def save_pairs_stream(pairs: Iterable[tuple[np.ndarray, np.ndarray]],
                      layer_index: int, d: int, path: str,
                      provenance: Optional[dict] = None, dtype: str = "f32"):
    """Write pairs from any iterable without materializing them."""
    if dtype not in ("f32", "f64"):
        raise InputError(f"pair dtype must be f32 or f64, got {dtype!r}")
    writer = _ContainerWriter()
    count = 0
    for x_i, x_o in pairs:
        writer.add(f"layer{layer_index}/sample{count}/x_i", x_i, dtype)
        writer.add(f"layer{layer_index}/sample{count}/x_o", x_o, dtype)
        count += 1
    header = {
        "kind": "pairset",
        "layer_index": int(layer_index),
        "num_samples": count,
        "d": int(d),
        "provenance": provenance or {},
    }
    writer.finish(path, header)


def iter_pairs(path: str) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Stream (x_i, x_o) pairs one sample at a time.

    The payload hash is verified only when the stream is fully consumed.
    """
    with _ContainerReader(path) as reader:
        header = reader.header
        if header["kind"] != "pairset":
            raise FormatError(f"expected a pair set, found kind {header['kind']!r}")
        try:
            layer_index = int(header["layer_index"])
            num = int(header["num_samples"])
            d = int(header["d"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed pair-set header: {exc}") from exc
        expected = []
        for k in range(num):
            expected.append(f"layer{layer_index}/sample{k}/x_i")
            expected.append(f"layer{layer_index}/sample{k}/x_o")
        if header["tensors"] != expected:
            raise FormatError("pair-set tensor names do not pair up completely")
        stream = reader.iter_tensors()
        for _ in range(num):
            _, x_i, _, _ = next(stream)
            _, x_o, _, _ = next(stream)
            if x_i.ndim != 2 or x_o.ndim != 2 or x_i.shape[1] != d or x_o.shape[1] != d:
                raise FormatError("pair width disagrees with header d")
            yield _f64(x_i), _f64(x_o)
        for _ in stream:  # drain to trigger hash/EOF verification
            raise FormatError("unexpected extra tensor records")


def load_pairs(path: str) -> HiddenStatePairSet:
    with _ContainerReader(path) as reader:
        header = reader.header
    pairs = list(iter_pairs(path))
    return HiddenStatePairSet(
        layer_index=int(header["layer_index"]), pairs=pairs, d=int(header["d"]),
        provenance=dict(header["provenance"]))


# ---------------------------------------------------------------------------
# reports


def save_report(report: dict, path: str, provenance: Optional[dict] = None):
    """Reports are structured text carried entirely in the header."""
    writer = _ContainerWriter()
    writer.finish(path, {"kind": "report", "report": report,
                         "provenance": provenance or {}})


def load_report(path: str) -> dict:
    with _ContainerReader(path) as reader:
        header = reader.header
        if header["kind"] != "report":
            raise FormatError(f"expected a report, found kind {header['kind']!r}")
        for _ in reader.iter_tensors():
            raise FormatError("report containers must not carry tensors")
        return header["report"]

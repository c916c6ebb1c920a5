"""Binary persistence: model checkpoints, anchor-trace cache, encodings.

Checkpoint container (little endian):

    magic "PSCK" | version u16 | 9 x u32 model config | n_tensors u32
    directory: per tensor u16 name length | utf-8 name | u8 rank |
               rank x u32 dims | u64 payload offset
    payload:   float32 tensor data, concatenated in directory order

Per-block shapes are authoritative on load, so physically sliced models
round-trip. The anchor cache ("PSAC") stores a JSON metadata header (adapter
rank/seed, calibration shape, model and calibration digests) followed by the
flat float32 trace vectors; a digest mismatch invalidates the cache. All
writes go through a temp file and os.replace.
"""

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from . import autodiff as ad
from .errors import FormatError, InputError
from .masks import ArchEncoding, zero_masked_slices
from .model import ATTN_PROJS, MLP_PROJS, Block, ModelConfig, SuperNetwork
from .proxy import GradientTrace

MAGIC_CHECKPOINT = b"PSCK"
MAGIC_ANCHOR = b"PSAC"
VERSION = 1

_CONFIG_FIELDS = ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_head",
                  "d_ff", "vocab_size", "context_length", "rounding_multiple")


def write_atomic(path, data):
    """Write bytes to path via a same-directory temp file and os.replace."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def network_digest(net):
    """SHA-256 over canonical tensor names, shapes and float32 bytes."""
    h = hashlib.sha256()
    for name, t in net.named_tensors():
        h.update(name.encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("ascii"))
        h.update(np.ascontiguousarray(t.data, dtype=np.float32).tobytes())
    return h.hexdigest()


def tokens_digest(tokens):
    return hashlib.sha256(np.ascontiguousarray(tokens, dtype=np.int64).tobytes()).hexdigest()


def _pack_directory(named):
    directory = bytearray()
    payload = bytearray()
    for name, arr in named:
        data = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        directory += struct.pack("<H", len(encoded)) + encoded
        directory += struct.pack("<B", data.ndim)
        directory += struct.pack(f"<{data.ndim}I", *data.shape)
        directory += struct.pack("<Q", len(payload))
        payload += data.tobytes()
    return bytes(directory), bytes(payload)


def save_checkpoint(path, net):
    header = MAGIC_CHECKPOINT + struct.pack("<H", VERSION)
    header += struct.pack("<9I", *(getattr(net.config, f) for f in _CONFIG_FIELDS))
    named = list(net.named_tensors())
    header += struct.pack("<I", len(named))
    directory, payload = _pack_directory((n, t.data) for n, t in named)
    write_atomic(path, header + directory + payload)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated file")
        out = self.blob[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_container(path, magic):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError:
        raise
    r = _Reader(blob, path)
    if r.take(4) != magic:
        raise FormatError(f"{path}: bad magic, expected {magic.decode()}")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return r


def _read_directory(r, n_tensors):
    entries = []
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        (offset,) = r.unpack("<Q")
        entries.append((name, shape, offset))
    payload = r.blob[r.pos:]
    arrays = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * count
        if end > len(payload):
            raise FormatError(f"{r.path}: tensor {name} extends past end of file")
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=count,
                                     offset=offset).reshape(shape).copy()
    return arrays


def load_checkpoint(path):
    r = _read_container(path, MAGIC_CHECKPOINT)
    values = r.unpack("<9I")
    config = ModelConfig(**dict(zip(_CONFIG_FIELDS, (int(v) for v in values))))
    (n_tensors,) = r.unpack("<I")
    arrays = _read_directory(r, n_tensors)

    def grab(name, trainable=True):
        if name not in arrays:
            raise FormatError(f"{path}: missing tensor {name}")
        return ad.Tensor(arrays.pop(name), requires_grad=trainable)

    embeddings = grab("embeddings")
    if embeddings.shape != (config.vocab_size, config.d_model):
        raise FormatError(f"{path}: embedding shape {embeddings.shape} disagrees with header")
    final_norm = grab("final_norm")
    blocks = []
    for l in range(config.n_layers):
        tensors = {"attn_norm": grab(f"block{l}.attn.norm"),
                   "mlp_norm": grab(f"block{l}.mlp.norm")}
        for name in ATTN_PROJS:
            tensors[name] = grab(f"block{l}.attn.{name}")
        for name in MLP_PROJS:
            tensors[name] = grab(f"block{l}.mlp.{name}")
        try:
            blocks.append(Block(tensors, config.d_head))
        except Exception as exc:
            raise FormatError(f"{path}: block {l} has inconsistent shapes: {exc}") from None
    if arrays:
        raise FormatError(f"{path}: unexpected extra tensors: {sorted(arrays)}")
    return SuperNetwork(config, embeddings, final_norm, blocks)


def realized_network(net, encoding, masks, slice_widths=False):
    """Standalone copy of the candidate. Masked slices are zeroed; dropped
    blocks keep their shape with all projections zeroed (exact identity).

    With slice_widths, retained MLP channels come out physically and so do
    attention heads under MHA; grouped-KV attention keeps the zeroed full
    shape because the head group mapping cannot change.
    """
    out = net.clone()
    out.adapters = None
    out.adapter_rank = None
    out.adapter_seed = None
    zero_masked_slices(out, encoding, masks)
    for l, blk in enumerate(out.blocks):
        if encoding.depth[l]:
            continue
        for _, t in blk.projections():
            t.data[:] = 0
    if slice_widths:
        for l, blk in enumerate(out.blocks):
            if not encoding.depth[l]:
                continue
            hm, cm = masks.heads[l], masks.channels[l]
            if blk.n_kv_heads == blk.n_heads and not hm.all():
                dh = blk.d_head
                rows = (np.flatnonzero(hm)[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
                blk.wq = ad.Tensor(blk.wq.data[rows].copy(), requires_grad=True)
                blk.wk = ad.Tensor(blk.wk.data[rows].copy(), requires_grad=True)
                blk.wv = ad.Tensor(blk.wv.data[rows].copy(), requires_grad=True)
                blk.wo = ad.Tensor(blk.wo.data[:, rows].copy(), requires_grad=True)
                blk.n_heads = blk.n_kv_heads = int(hm.sum())
            if not cm.all():
                ch = np.flatnonzero(cm)
                blk.wup = ad.Tensor(blk.wup.data[ch].copy(), requires_grad=True)
                blk.wgate = ad.Tensor(blk.wgate.data[ch].copy(), requires_grad=True)
                blk.wdown = ad.Tensor(blk.wdown.data[:, ch].copy(), requires_grad=True)
                blk.d_ff = int(cm.sum())
    out.block_active[:] = True
    return out


def save_anchor(path, trace, model_digest, calib_digest):
    keys = sorted(trace.entries)
    meta = {
        "rank": trace.rank,
        "adapter_seed": trace.adapter_seed,
        "n_sequences": trace.n_sequences,
        "seq_length": trace.seq_length,
        "model_digest": model_digest,
        "calib_digest": calib_digest,
        "entries": [[l, sub, int(trace.entries[(l, sub)].size)] for l, sub in keys],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = MAGIC_ANCHOR + struct.pack("<H", VERSION) + struct.pack("<I", len(blob)) + blob
    out += b"".join(np.ascontiguousarray(trace.entries[k], dtype="<f4").tobytes() for k in keys)
    write_atomic(path, out)


def load_anchor(path):
    """Returns (GradientTrace, metadata dict)."""
    r = _read_container(path, MAGIC_ANCHOR)
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: bad metadata block: {exc}") from None
    entries = {}
    for layer, sub, size in meta["entries"]:
        vec = np.frombuffer(r.take(4 * size), dtype="<f4").copy()
        entries[(int(layer), str(sub))] = vec
    trace = GradientTrace(entries, meta["rank"], meta["adapter_seed"],
                          meta["n_sequences"], meta["seq_length"])
    return trace, meta


def get_or_compute_anchor(path, net, calib, compute):
    """Load a cached anchor when its digests match, else compute and cache.

    compute is a zero-argument callable returning the fresh trace.
    """
    model_digest = network_digest(net)
    calib_digest = tokens_digest(calib.tokens)
    if path and os.path.exists(path):
        try:
            trace, meta = load_anchor(path)
        except FormatError:
            trace, meta = None, None
        if (meta is not None
                and meta.get("model_digest") == model_digest
                and meta.get("calib_digest") == calib_digest
                and meta.get("rank") == net.adapter_rank
                and meta.get("adapter_seed") == net.adapter_seed):
            return trace, True
    trace = compute()
    if path:
        save_anchor(path, trace, model_digest, calib_digest)
    return trace, False


def save_encoding(path, encoding):
    write_atomic(path, (json.dumps(encoding.to_json_dict(), indent=2) + "\n").encode("utf-8"))


def load_encoding(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except ValueError as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}") from None
    try:
        return ArchEncoding.from_json_dict(obj)
    except InputError as exc:
        raise FormatError(f"{path}: {exc}") from None

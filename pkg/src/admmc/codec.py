"""Bit-exact storage of pruned and discretized networks (``.admmc``).

Stream layout, all integers little-endian::

    "ADMMCMP1"
    u8 ndim, u32[ndim] input shape
    u32 n_layers, then per layer: u8 kind tag, u8 n_hyper, u32[n_hyper]
    per trainable layer:
        u8 ndim, u32[ndim] weight shape
        u8 codebook kind (0 quant, 1 cluster, 2 raw), u8 bits
        quant:   f32 q, u32 M
        cluster: u32 count, f32[count] entries
        u32 survivors, u32 index nibbles, index bytes, packed code bytes
        u8 ndim, u32[ndim] bias shape, f32 bias data

The prune index is a stream of 4-bit relative gaps: a nibble ``g < 15``
skips ``g`` pruned positions and marks the next position as a survivor;
``15`` is an escape that skips 15 positions without a survivor. Codes are
``bits``-wide indices into the sorted codebook, packed MSB first. Raw
layers store survivors as f32.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ExactnessError, FormatError
from .projections import ClusterSpec, QuantSpec, quant_levels

MAGIC = b"ADMMCMP1"
KIND_TAGS = {"quant": 0, "cluster": 1, "raw": 2}
_TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
ESCAPE = 15


@dataclass
class Codebook:
    layer: int
    kind: str
    bits: int
    entries: np.ndarray | None = None
    q: float | None = None
    M: int | None = None

    def __post_init__(self):
        if self.kind not in KIND_TAGS:
            raise ValueError(f"unknown codebook kind {self.kind!r}")
        if self.kind == "quant":
            self.q = float(np.float32(self.q))
            self.entries = np.concatenate(
                [-quant_levels(self.q, self.M, np.float32)[::-1], quant_levels(self.q, self.M, np.float32)]
            )
        if self.entries is not None:
            self.entries = np.asarray(self.entries, dtype=np.float32)
            if np.any(np.diff(self.entries) <= 0):
                raise ValueError("codebook entries must be strictly increasing")
            if len(self.entries) > 2**self.bits:
                raise ValueError(f"{len(self.entries)} entries do not fit in {self.bits} bits")

    @property
    def size_bytes(self):
        """Bytes of codebook payload counted as weight data."""
        if self.kind == "quant":
            return 4
        if self.kind == "cluster":
            return 4 * len(self.entries)
        return 0

    @classmethod
    def from_spec(cls, layer, spec, bits=None):
        if spec is None:
            return cls(layer, "raw", 32)
        if isinstance(spec, QuantSpec):
            return cls(layer, "quant", bits or int(math.log2(spec.M)), q=spec.q, M=spec.M)
        if isinstance(spec, ClusterSpec):
            entries = np.unique(np.asarray(spec.centroids).astype(np.float32))
            return cls(layer, "cluster", bits or max(1, math.ceil(math.log2(spec.M))), entries=entries)
        raise TypeError(f"cannot build a codebook from {type(spec).__name__}")

    def to_dict(self):
        d = {"layer": self.layer, "kind": self.kind, "bits": self.bits}
        if self.kind == "quant":
            d.update(q=self.q, M=self.M)
        elif self.kind == "cluster":
            d["entries"] = [float(e) for e in self.entries]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["layer"], d["kind"], d["bits"], entries=d.get("entries"), q=d.get("q"), M=d.get("M"))


# ---------------------------------------------------------------------------
# relative index and code packing
# ---------------------------------------------------------------------------


def encode_index(mask):
    """Nibble stream (uint8 values 0..15) for the survivors of a flat mask."""
    pos = np.flatnonzero(np.asarray(mask).ravel())
    if pos.size == 0:
        return np.zeros(0, dtype=np.uint8)
    gaps = np.diff(np.concatenate([[-1], pos])) - 1
    per = gaps // ESCAPE + 1
    out = np.full(int(per.sum()), ESCAPE, dtype=np.uint8)
    out[np.cumsum(per) - 1] = gaps % ESCAPE
    return out


def decode_index(nibbles, numel):
    nib = np.asarray(nibbles, dtype=np.int64)
    advance = np.where(nib == ESCAPE, ESCAPE, nib + 1)
    ends = np.cumsum(advance) - 1
    pos = ends[nib != ESCAPE]
    if pos.size and pos[-1] >= numel:
        raise FormatError(f"prune index points past the end of a {numel}-element layer")
    mask = np.zeros(numel, dtype=bool)
    mask[pos] = True
    return mask


def index_nibble_count(mask):
    pos = np.flatnonzero(np.asarray(mask).ravel())
    if pos.size == 0:
        return 0
    gaps = np.diff(np.concatenate([[-1], pos])) - 1
    return int((gaps // ESCAPE + 1).sum())


def pack_nibbles(nib):
    nib = np.asarray(nib, dtype=np.uint8)
    if nib.size % 2:
        nib = np.concatenate([nib, [0]]).astype(np.uint8)
    return ((nib[0::2] << 4) | nib[1::2]).astype(np.uint8).tobytes()


def unpack_nibbles(buf, count):
    b = np.frombuffer(buf, dtype=np.uint8)
    out = np.empty(2 * b.size, dtype=np.uint8)
    out[0::2] = b >> 4
    out[1::2] = b & 0x0F
    return out[:count]


def pack_codes(codes, bits):
    codes = np.asarray(codes, dtype=np.uint64)
    if codes.size == 0:
        return b""
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint64)
    bitmat = ((codes[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bitmat.ravel()).tobytes()


def unpack_codes(buf, count, bits):
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    flat = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))[: count * bits]
    weights = (1 << np.arange(bits - 1, -1, -1)).astype(np.int64)
    return flat.reshape(count, bits).astype(np.int64) @ weights


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------


def _codes_for(values, book):
    entries = book.entries
    codes = np.searchsorted(entries, values)
    codes = np.minimum(codes, len(entries) - 1)
    bad = entries[codes] != values
    if np.any(bad):
        v = values[np.flatnonzero(bad)[0]]
        raise ExactnessError(
            f"layer {book.layer}: surviving weight {v!r} is not a codebook entry (finalization skipped?)"
        )
    return codes


def encode(net, masks, codebooks):
    """Serialize a pruned, discretized network; deterministic byte output."""
    out = io.BytesIO()
    w = out.write
    w(MAGIC)
    w(struct.pack("<B", len(net.input_shape)))
    w(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    w(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        hyper = layer.hyper()
        w(struct.pack("<BB", nn.LAYER_TAGS[layer.kind], len(hyper)))
        w(struct.pack(f"<{len(hyper)}I", *hyper))
    for i, p in enumerate(net.params):
        W = np.asarray(p["W"], dtype=np.float32)
        mask = np.asarray(masks[i], dtype=bool)
        book = codebooks[i] if codebooks[i] is not None else Codebook(i, "raw", 32)
        w(struct.pack("<B", W.ndim))
        w(struct.pack(f"<{W.ndim}I", *W.shape))
        w(struct.pack("<BB", KIND_TAGS[book.kind], book.bits))
        if book.kind == "quant":
            w(struct.pack("<fI", book.q, book.M))
        elif book.kind == "cluster":
            w(struct.pack("<I", len(book.entries)))
            w(book.entries.astype("<f4").tobytes())
        values = W.ravel()[mask.ravel()]
        nib = encode_index(mask)
        w(struct.pack("<II", values.size, nib.size))
        w(pack_nibbles(nib))
        if book.kind == "raw":
            w(values.astype("<f4").tobytes())
        else:
            w(pack_codes(_codes_for(values, book), book.bits))
        b = np.asarray(p["b"], dtype=np.float32)
        w(struct.pack("<B", b.ndim))
        w(struct.pack(f"<{b.ndim}I", *b.shape))
        w(b.astype("<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated .admmc stream while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return bytes(out)

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf):
    """Inverse of :func:`encode`; returns ``(net, masks, codebooks)``."""
    r = _Reader(buf)
    if len(buf) < len(MAGIC) or bytes(buf[: len(MAGIC)]) != MAGIC:
        raise FormatError("not an .admmc stream (bad magic)")
    r.take(len(MAGIC), "magic")
    (nd,) = r.unpack("<B", "input rank")
    input_shape = r.unpack(f"<{nd}I", "input shape")
    (n_layers,) = r.unpack("<I", "layer count")
    layers = []
    for _ in range(n_layers):
        tag, nh = r.unpack("<BB", "layer table")
        if tag not in nn._TAG_TO_CLS:
            raise FormatError(f"unknown layer tag {tag}")
        layers.append(nn._TAG_TO_CLS[tag](*r.unpack(f"<{nh}I", "layer table")))
    net = nn.Network(layers, input_shape, init=False)
    masks, books = [], []
    for i, p in enumerate(net.params):
        (nd,) = r.unpack("<B", "weight rank")
        shape = r.unpack(f"<{nd}I", "weight shape")
        if tuple(shape) != p["W"].shape:
            raise FormatError(f"layer {i}: stored shape {shape} disagrees with layer table")
        ktag, bits = r.unpack("<BB", "codebook header")
        if ktag not in _TAG_KINDS:
            raise FormatError(f"layer {i}: unknown codebook kind {ktag}")
        kind = _TAG_KINDS[ktag]
        if kind == "quant":
            q, M = r.unpack("<fI", "quantization interval")
            book = Codebook(i, "quant", bits, q=q, M=M)
        elif kind == "cluster":
            (cnt,) = r.unpack("<I", "codebook size")
            entries = np.frombuffer(r.take(4 * cnt, "codebook entries"), dtype="<f4")
            book = Codebook(i, "cluster", bits, entries=entries)
        else:
            book = Codebook(i, "raw", bits)
        numel = int(np.prod(shape))
        n_surv, n_nib = r.unpack("<II", "survivor counts")
        nib = unpack_nibbles(r.take((n_nib + 1) // 2, "prune index"), n_nib)
        if int((nib != ESCAPE).sum()) != n_surv:
            raise FormatError(f"layer {i}: index stream has {(nib != ESCAPE).sum()} survivors, header says {n_surv}")
        mask = decode_index(nib, numel)
        if kind == "raw":
            values = np.frombuffer(r.take(4 * n_surv, "raw weights"), dtype="<f4").astype(np.float32)
        else:
            codes = unpack_codes(r.take((n_surv * bits + 7) // 8, "weight codes"), n_surv, bits)
            if codes.size and codes.max() >= len(book.entries):
                raise FormatError(f"layer {i}: code {codes.max()} out of codebook range ({len(book.entries)} entries)")
            values = book.entries[codes]
        W = np.zeros(numel, dtype=np.float32)
        W[mask] = values
        (bnd,) = r.unpack("<B", "bias rank")
        bshape = r.unpack(f"<{bnd}I", "bias shape")
        b = np.frombuffer(r.take(4 * int(np.prod(bshape)), "bias data"), dtype="<f4").astype(np.float32)
        p["W"] = W.reshape(shape)
        p["b"] = b.reshape(bshape)
        masks.append(mask.reshape(shape))
        books.append(book)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last layer")
    return net, masks, books


def make_codebooks(specs):
    return [Codebook.from_spec(i, s) for i, s in enumerate(specs)]


def save(path, net, masks, codebooks):
    data = encode(net, masks, codebooks)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load(path):
    with open(path, "rb") as f:
        return decode(f.read())


# ---------------------------------------------------------------------------
# size accounting
# ---------------------------------------------------------------------------


def estimated_index_nibbles(numel, survivors):
    """Index length if the survivors were evenly spread over the layer."""
    if survivors == 0:
        return 0
    gap = (numel - survivors) / survivors
    return int(survivors * (1 + math.floor(gap / ESCAPE)))


def layer_stats(net, masks, codebooks, names=None):
    """Per-layer inputs for :func:`compute_ratios` from an actual model."""
    stats = []
    for i, p in enumerate(net.params):
        book = codebooks[i] if codebooks[i] is not None else Codebook(i, "raw", 32)
        stats.append(
            {
                "name": names[i] if names else f"layer{i}",
                "numel": int(p["W"].size),
                "survivors": int(np.count_nonzero(masks[i])),
                "bits": int(book.bits),
                "kind": book.kind,
                "codebook_entries": None if book.entries is None else int(len(book.entries)),
                "index_nibbles": index_nibble_count(masks[i]),
            }
        )
    return stats


def _codebook_bytes(st):
    kind = st.get("kind") or ("raw" if st["bits"] >= 32 else "quant")
    if kind == "quant":
        return 4
    if kind == "cluster":
        return 4 * int(st.get("codebook_entries") or 2 ** st["bits"])
    return 0


def compute_ratios(stats, include_codebook=True):
    """Data/model size and compression ratios against a dense 32-bit baseline.

    ``data_size_bytes`` is the packed codes (``ceil(survivors * bits / 8)`` per
    layer) plus, unless ``include_codebook`` is False, the codebook payload.
    ``model_size_bytes`` adds the prune index (``ceil(nibbles / 2)`` per layer;
    estimated from an even spread when ``index_nibbles`` is not given).
    """
    layers = []
    baseline = data = index = 0
    for st in stats:
        numel, surv, bits = int(st["numel"]), int(st["survivors"]), int(st["bits"])
        if not 1 <= bits <= 32:
            raise ValueError(f"bits must lie in [1, 32], got {bits}")
        if not 0 <= surv <= numel:
            raise ValueError(f"survivors {surv} outside [0, {numel}]")
        nib = st.get("index_nibbles")
        estimated = nib is None
        if estimated:
            # a dense layer needs no index at all
            nib = estimated_index_nibbles(numel, surv) if surv < numel else 0
        code_bytes = (surv * bits + 7) // 8
        book_bytes = _codebook_bytes(st) if include_codebook else 0
        idx_bytes = (nib + 1) // 2
        baseline += numel * 4
        data += code_bytes + book_bytes
        index += idx_bytes
        layers.append(
            {
                "name": st.get("name"),
                "numel": numel,
                "survivors": surv,
                "bits": bits,
                "code_bytes": code_bytes,
                "codebook_bytes": book_bytes,
                "index_bytes": idx_bytes,
                "index_estimated": estimated,
            }
        )
    model = data + index
    return {
        "layers": layers,
        "total_weights": sum(l["numel"] for l in layers),
        "total_survivors": sum(l["survivors"] for l in layers),
        "baseline_bytes": baseline,
        "data_size_bytes": data,
        "model_size_bytes": model,
        "data_ratio": baseline / data if data else math.inf,
        "model_ratio": baseline / model if model else math.inf,
        "pruning_ratio": (sum(l["numel"] for l in layers) / max(1, sum(l["survivors"] for l in layers))),
        "include_codebook": include_codebook,
    }


def encoded_size(net, masks, codebooks):
    """Exact length of ``encode(net, masks, codebooks)`` without encoding."""
    size = len(MAGIC) + 1 + 4 * len(net.input_shape) + 4
    for layer in net.layers:
        size += 2 + 4 * len(layer.hyper())
    for i, p in enumerate(net.params):
        book = codebooks[i] if codebooks[i] is not None else Codebook(i, "raw", 32)
        surv = int(np.count_nonzero(masks[i]))
        size += 1 + 4 * p["W"].ndim + 2
        size += {"quant": 8, "cluster": 4 + 4 * len(book.entries if book.entries is not None else []), "raw": 0}[
            book.kind
        ]
        size += 8 + (index_nibble_count(masks[i]) + 1) // 2
        size += 4 * surv if book.kind == "raw" else (surv * book.bits + 7) // 8
        size += 1 + 4 * p["b"].ndim + 4 * p["b"].size
    return size

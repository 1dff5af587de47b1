"""Attention-trace data model, binary file format, and synthetic generator.

A trace holds per-(layer, head) query/key/value projections for a prompt
plus a generated continuation. The byte layout of trace files is the
cross-language contract documented in docs/trace_format.md; readers and
writers here must stay bit-exact with it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ContractViolation,
    TraceFormatError,
    TruncatedTraceError,
    VersionMismatchError,
)
from .rng import SplitMix64

MAGIC = b"KVTRACE1"
FORMAT_VERSION = 1

# Header flag bits (informational; the replay math ignores them).
FLAG_POSITION_ENCODED_KEYS = 1 << 0
FLAG_REPLICATED_KV_HEADS = 1 << 1

_HEADER_FIXED = struct.Struct("<8sII")  # magic, version, flags
_HEADER_DIMS = struct.Struct("<IIIII")  # layers, heads, head_dim, prompt_len, total_len
_MAX_NAME_LEN = 1 << 16


@dataclass(frozen=True, eq=False)
class AttentionTrace:
    """Per-(layer, head) Q/K/V matrices for one prompt + continuation.

    q, k, v have shape (num_layers, num_heads, total_len, head_dim); row t of
    a (layer, head) slice is the projection of token t.
    """

    model_name: str
    num_layers: int
    num_heads: int
    head_dim: int
    prompt_len: int
    total_len: int
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    flags: int = field(default=0)

    def __post_init__(self):
        if not (self.total_len >= self.prompt_len >= 1):
            raise ContractViolation(
                f"need total_len >= prompt_len >= 1, got {self.total_len}, {self.prompt_len}"
            )
        expected = (self.num_layers, self.num_heads, self.total_len, self.head_dim)
        for name, arr in (("q", self.q), ("k", self.k), ("v", self.v)):
            if arr.shape != expected:
                raise ContractViolation(f"{name} shape {arr.shape} != {expected}")
            if arr.dtype != np.float64:
                raise ContractViolation(f"{name} must be float64, got {arr.dtype}")
            if not np.isfinite(arr).all():
                raise ContractViolation(f"{name} contains non-finite entries")

    @property
    def gen_len(self) -> int:
        return self.total_len - self.prompt_len

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttentionTrace):
            return NotImplemented
        return (
            self.model_name == other.model_name
            and self.flags == other.flags
            and (self.num_layers, self.num_heads, self.head_dim) ==
                (other.num_layers, other.num_heads, other.head_dim)
            and (self.prompt_len, self.total_len) == (other.prompt_len, other.total_len)
            and np.array_equal(self.q, other.q)
            and np.array_equal(self.k, other.k)
            and np.array_equal(self.v, other.v)
        )


def generate_synthetic(
    seed: int,
    layers: int,
    heads: int,
    head_dim: int,
    prompt_len: int,
    gen_len: int,
    sink_strength: float = 12.0,
    clusters: int = 16,
    cluster_noise: float = 0.35,
) -> AttentionTrace:
    """Build a deterministic trace from a tiny random-weight causal stack.

    Token embeddings are drawn around a small set of latent cluster centers
    (real token streams are redundant; cluster mates make near-duplicate
    keys and values, which is what gives token merging something to
    consolidate). Per-head projection weights come from the same seeded
    SplitMix64 stream; each layer projects the current hidden state to
    Q/K/V, then a residual mixing matrix rotates the hidden state so deeper
    layers see different geometry.

    Depth shapes the attention statistics on purpose. The logit scale ramps
    up with layer index, sharpening attention, and a first-token "sink"
    boost ramps from 0 (layer 0) to sink_strength (deepest layer): every
    query is given a fixed component along a per-head direction u and the
    first key a matching boost, which adds an exact sink_strength * depth
    bonus to the first column's logits. Layer 0 therefore attends
    near-uniformly (low column-sum variance) while deep layers concentrate
    mass on the sink and a few heavy columns (high variance).
    sink_strength = 0 disables the bias.
    """
    for name, value in (
        ("layers", layers), ("heads", heads), ("head_dim", head_dim),
        ("prompt_len", prompt_len), ("gen_len", gen_len), ("clusters", clusters),
    ):
        if value < 1:
            raise ContractViolation(f"{name} must be >= 1, got {value}")

    total_len = prompt_len + gen_len
    d_model = heads * head_dim
    rng = SplitMix64(seed)

    centers = rng.normal((clusters, d_model))
    assignment = np.minimum((rng.uniform(total_len) * clusters).astype(np.int64), clusters - 1)
    x = centers[assignment] + cluster_noise * rng.normal((total_len, d_model))
    x *= np.sqrt(d_model) / np.linalg.norm(x, axis=1, keepdims=True)
    q = np.empty((layers, heads, total_len, head_dim))
    k = np.empty_like(q)
    v = np.empty_like(q)

    for layer in range(layers):
        depth = layer / (layers - 1) if layers > 1 else 0.0
        logit_scale = 0.45 + 1.05 * depth          # sharper attention with depth
        boost = sink_strength * depth              # first-token logit bonus
        for head in range(heads):
            w_q = rng.normal((d_model, head_dim)) / np.sqrt(d_model)
            w_k = rng.normal((d_model, head_dim)) / np.sqrt(d_model)
            w_v = rng.normal((d_model, head_dim)) / np.sqrt(d_model)
            qh = (x @ w_q) * logit_scale
            kh = (x @ w_k) * logit_scale
            if boost > 0.0:
                u = rng.normal(head_dim)
                u /= np.linalg.norm(u)
                # Pin every query's component along u to exactly 1, so the
                # boosted first key contributes a deterministic +boost logit.
                qh += (1.0 - qh @ u)[:, None] * u
                kh[0] += boost * np.sqrt(head_dim) * u
            q[layer, head] = qh
            k[layer, head] = kh
            v[layer, head] = x @ w_v
        mix = rng.normal((d_model, d_model)) / np.sqrt(d_model)
        x = x + x @ mix
        x *= np.sqrt(d_model) / np.linalg.norm(x, axis=1, keepdims=True)

    return AttentionTrace(
        model_name=f"synthetic-s{seed}",
        num_layers=layers,
        num_heads=heads,
        head_dim=head_dim,
        prompt_len=prompt_len,
        total_len=total_len,
        q=q, k=k, v=v,
    )


def write_trace(trace: AttentionTrace, path) -> None:
    """Serialize a trace to the KVTRACE1 binary layout."""
    name_bytes = trace.model_name.encode("utf-8")
    if len(name_bytes) > _MAX_NAME_LEN:
        raise ContractViolation(f"model_name exceeds {_MAX_NAME_LEN} bytes")
    with open(path, "wb") as fh:
        fh.write(_HEADER_FIXED.pack(MAGIC, FORMAT_VERSION, trace.flags))
        fh.write(struct.pack("<I", len(name_bytes)))
        fh.write(name_bytes)
        fh.write(_HEADER_DIMS.pack(
            trace.num_layers, trace.num_heads, trace.head_dim,
            trace.prompt_len, trace.total_len,
        ))
        for layer in range(trace.num_layers):
            for head in range(trace.num_heads):
                for block in (trace.q, trace.k, trace.v):
                    fh.write(np.ascontiguousarray(block[layer, head], dtype="<f8").tobytes())


def read_trace(path) -> AttentionTrace:
    """Parse a KVTRACE1 file, failing loudly on any malformed byte."""
    with open(path, "rb") as fh:
        data = fh.read()

    def take(n: int, what: str, offset: int) -> bytes:
        if offset + n > len(data):
            raise TruncatedTraceError(
                f"truncated {what}: expected {offset + n} bytes so far, file has {len(data)}"
            )
        return data[offset:offset + n]

    off = 0
    magic, version, flags = _HEADER_FIXED.unpack(take(_HEADER_FIXED.size, "header", off))
    off += _HEADER_FIXED.size
    if magic != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"unsupported trace version {version}; this reader handles {FORMAT_VERSION}"
        )
    (name_len,) = struct.unpack("<I", take(4, "name length", off))
    off += 4
    if name_len > _MAX_NAME_LEN:
        raise TraceFormatError(f"model name length {name_len} exceeds limit {_MAX_NAME_LEN}")
    name = take(name_len, "model name", off).decode("utf-8")
    off += name_len
    layers, heads, head_dim, prompt_len, total_len = _HEADER_DIMS.unpack(
        take(_HEADER_DIMS.size, "dimensions", off)
    )
    off += _HEADER_DIMS.size

    if min(layers, heads, head_dim, prompt_len, total_len) < 1:
        raise TraceFormatError(
            f"dimensions must be >= 1, got layers={layers} heads={heads} "
            f"head_dim={head_dim} prompt_len={prompt_len} total_len={total_len}"
        )
    if total_len < prompt_len:
        raise TraceFormatError(f"total_len {total_len} < prompt_len {prompt_len}")

    block_values = total_len * head_dim
    expected_payload = layers * heads * 3 * block_values * 8
    actual_payload = len(data) - off
    if actual_payload < expected_payload:
        raise TruncatedTraceError(
            f"truncated payload: expected {expected_payload} bytes, found {actual_payload}"
        )
    if actual_payload > expected_payload:
        raise TraceFormatError(
            f"trailing bytes after payload: expected {expected_payload}, found {actual_payload}"
        )

    flat = np.frombuffer(data, dtype="<f8", count=layers * heads * 3 * block_values, offset=off)
    blocks = flat.reshape(layers, heads, 3, total_len, head_dim)
    q = np.ascontiguousarray(blocks[:, :, 0]).astype(np.float64)
    k = np.ascontiguousarray(blocks[:, :, 1]).astype(np.float64)
    v = np.ascontiguousarray(blocks[:, :, 2]).astype(np.float64)

    try:
        return AttentionTrace(
            model_name=name, num_layers=layers, num_heads=heads, head_dim=head_dim,
            prompt_len=prompt_len, total_len=total_len, q=q, k=k, v=v, flags=flags,
        )
    except ContractViolation as exc:
        raise TraceFormatError(f"invalid trace contents: {exc}") from exc

"""Binary checkpoint of a network's quantized weights.

Layout (all integers little-endian)::

    b"APT1"                      magic
    u32  layer_count
    per layer:
      u8   k                     bitwidth
      f64  scale
      u32  zero_point
      u8   ndim
      u32  dim[ndim]
      codes                      prod(dim) codes, ceil(k/8) bytes each, LE
      u32  bias_len
      f64  bias[bias_len]

Nothing else is stored: there is no float copy of the weights.
"""
from __future__ import annotations

import struct

import numpy as np

from .quantizer import QuantizedTensor, QuantParams, quantize_fit

MAGIC = b"APT1"


def code_bytes(k: int) -> int:
    return (k + 7) // 8


def _pack_codes(codes, k):
    nb = code_bytes(k)
    c = np.ascontiguousarray(codes, dtype="<u8").reshape(-1)
    return c.view(np.uint8).reshape(-1, 8)[:, :nb].tobytes()


def _unpack_codes(buf, k, count):
    nb = code_bytes(k)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(count, nb)
    full = np.zeros((count, 8), dtype=np.uint8)
    full[:, :nb] = raw
    return full.view("<u8").reshape(-1).astype(np.int64)


def dumps(net) -> bytes:
    layers = net.param_layers
    out = [MAGIC, struct.pack("<I", len(layers))]
    for layer in layers:
        # fp32 reference layers are stored at 32 bits
        q = layer.weights if layer.quantized else quantize_fit(layer.weight_values(), 32)
        p = q.params
        out.append(struct.pack("<BdIB", p.bitwidth, p.scale, p.zero_point, q.codes.ndim))
        out.append(struct.pack(f"<{q.codes.ndim}I", *q.codes.shape))
        out.append(_pack_codes(q.codes, p.bitwidth))
        out.append(struct.pack("<I", layer.bias.size))
        out.append(layer.bias.astype("<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ValueError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes):
    """Decode a checkpoint into a list of ``(QuantizedTensor, bias)`` pairs."""
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise ValueError("not an APT1 checkpoint")
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        k, scale, zp, ndim = r.unpack("<BdIB")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape))
        codes = _unpack_codes(r.take(count * code_bytes(k)), k, count).reshape(shape)
        (nb,) = r.unpack("<I")
        bias = np.frombuffer(r.take(8 * nb), dtype="<f8").astype(np.float64)
        layers.append((QuantizedTensor(codes, QuantParams(scale, zp, k)), bias))
    if r.pos != len(buf):
        raise ValueError("trailing bytes after checkpoint")
    return layers


def save(net, path):
    with open(path, "wb") as f:
        f.write(dumps(net))


def load_into(net, path):
    """Overwrite the weights of ``net`` (same architecture) from ``path``."""
    with open(path, "rb") as f:
        stored = loads(f.read())
    layers = net.param_layers
    if len(stored) != len(layers):
        raise ValueError(f"checkpoint has {len(stored)} layers, network has {len(layers)}")
    for layer, (q, bias) in zip(layers, stored):
        if q.shape != layer.weight_shape or bias.shape != layer.bias.shape:
            raise ValueError("checkpoint shapes do not match the network")
        layer.weights, layer._w_real = q, None
        layer.bias = bias.copy()
        layer.gavg_ema = None
    return net

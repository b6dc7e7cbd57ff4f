"""Readers and writers for the AIQ model manifest, AIQW weights and AIQD
datasets, plus a torch interpreter for manifests.

The interpreter is deliberately independent of the Rust engine: it uses
torch's own conv/linear/batchnorm kernels and is only used to train fixtures
and to produce reference logits.
"""

import json
import struct

import numpy as np
import torch
import torch.nn.functional as F

ALIGN = 64
BN_EPS = 1e-5
QMAX = {8: 127, 4: 7}


def _align(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def read_aiqw(path):
    raw = open(path, "rb").read()
    assert raw[:4] == b"AIQW", "not an AIQW file"
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen])
    start = _align(8 + hlen)
    out = {}
    for tid, e in header.items():
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        off = start + e["offset"]
        if e["dtype"] == "f32":
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
        elif e["dtype"] == "i8":
            arr = np.frombuffer(raw, dtype=np.int8, count=n, offset=off).astype(np.float32) * np.float32(e["scale"])
        elif e["dtype"] == "i4p":
            b = np.frombuffer(raw, dtype=np.uint8, count=(n + 1) // 2, offset=off)
            codes = np.empty(2 * len(b), dtype=np.int8)
            codes[0::2] = (b & 0x0F).astype(np.int8)
            codes[1::2] = (b >> 4).astype(np.int8)
            codes = np.where(codes > 7, codes - 16, codes)[:n]
            arr = codes.astype(np.float32) * np.float32(e["scale"])
        else:
            raise ValueError(f"unknown dtype {e['dtype']}")
        out[tid] = arr.reshape(e["shape"]).copy()
    return out


def write_aiqw(path, tensors):
    """Writes f32 tensors in sorted id order."""
    header, blobs, offset = {}, [], 0
    for tid in sorted(tensors):
        arr = np.ascontiguousarray(tensors[tid], dtype="<f4")
        header[tid] = {"offset": offset, "shape": list(arr.shape), "dtype": "f32"}
        blobs.append((offset, arr.tobytes()))
        offset = _align(offset + arr.nbytes)
    hbytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    start = _align(8 + len(hbytes))
    buf = bytearray(start + offset)
    buf[:4] = b"AIQW"
    buf[4:8] = struct.pack("<I", len(hbytes))
    buf[8 : 8 + len(hbytes)] = hbytes
    for off, b in blobs:
        buf[start + off : start + off + len(b)] = b
    open(path, "wb").write(bytes(buf))


def read_aiqd(path):
    raw = open(path, "rb").read()
    assert raw[:4] == b"AIQD", "not an AIQD file"
    n, c, h, w = struct.unpack("<4I", raw[4:20])
    px = n * c * h * w
    x = np.frombuffer(raw, dtype="<f4", count=px, offset=20).reshape(n, c, h, w)
    y = np.frombuffer(raw, dtype="<u2", count=n, offset=20 + 4 * px)
    return x.copy(), y.astype(np.int64)


def normalize(manifest, x):
    norm = manifest.get("normalization")
    if not norm:
        return x
    mean = np.asarray(norm["mean"], dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(norm["std"], dtype=np.float32).reshape(1, -1, 1, 1)
    return (x - mean) / std


def quantizable(manifest):
    return [l for l in manifest["layers"] if l["kind"] in ("conv2d", "linear")]


def fake_quant(w, bits):
    """Per-tensor symmetric, restricted range, round half away from zero."""
    if bits == 32:
        return w
    q = QMAX[bits]
    m = np.abs(w).max()
    if m == 0:
        return np.zeros_like(w)
    scale = np.float32(m / q)
    codes = np.clip(np.sign(w) * np.floor(np.abs(w / scale) + 0.5), -q, q)
    return (codes * scale).astype(w.dtype)


class ManifestNet(torch.nn.Module):
    """Executes a manifest layer by layer. `train()` mode uses batch
    statistics for batchnorm and updates the running buffers."""

    def __init__(self, manifest, weights):
        super().__init__()
        self.manifest = manifest
        self.params = torch.nn.ParameterDict()
        self.stats = {}
        for layer in manifest["layers"]:
            for key in ("weight", "bias"):
                tid = layer.get(key)
                if tid:
                    self.params[tid.replace(".", "__")] = torch.nn.Parameter(torch.tensor(weights[tid]))
            if layer["kind"] == "batchnorm2d":
                p = layer["params"]
                for key in ("running_mean", "running_var"):
                    name = p[key].replace(".", "__")
                    self.register_buffer(name, torch.tensor(weights[p[key]]))
                    self.stats[p[key]] = name

    def tensor(self, tid):
        return self.params[tid.replace(".", "__")]

    def forward(self, x, overrides=None):
        overrides = overrides or {}
        outs = {}
        cur = x
        for layer in self.manifest["layers"]:
            kind, p = layer["kind"], layer["params"]
            w = None
            if layer.get("weight"):
                w = overrides.get(layer["weight"], self.tensor(layer["weight"]))
            b = self.tensor(layer["bias"]) if layer.get("bias") else None
            if kind == "conv2d":
                cur = F.conv2d(cur, w, b, stride=p["stride"], padding=p["padding"], groups=p.get("groups", 1))
            elif kind == "linear":
                cur = F.linear(cur, w, b)
            elif kind == "batchnorm2d":
                rm = getattr(self, self.stats[p["running_mean"]])
                rv = getattr(self, self.stats[p["running_var"]])
                cur = F.batch_norm(cur, rm, rv, w, b, training=self.training, momentum=0.1, eps=BN_EPS)
            elif kind == "relu":
                cur = F.relu(cur)
            elif kind == "avgpool2d":
                cur = F.avg_pool2d(cur, p["kernel"], p["stride"])
            elif kind == "global_avg_pool":
                cur = cur.mean(dim=(2, 3), keepdim=True)
            elif kind == "flatten":
                cur = cur.flatten(1)
            elif kind == "add":
                cur = cur + outs[layer["residual_from"]]
            else:
                raise ValueError(f"unsupported layer kind {kind}")
            outs[layer["id"]] = cur
        return cur

    def export(self):
        out = {tid.replace("__", "."): p.detach().cpu().numpy() for tid, p in self.params.items()}
        for tid, name in self.stats.items():
            out[tid] = getattr(self, name).detach().cpu().numpy()
        return out

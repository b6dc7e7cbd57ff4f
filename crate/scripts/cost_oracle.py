"""Closed-form FLOPs, bytes and arithmetic intensity straight from a manifest.

    python scripts/cost_oracle.py fixtures/resnet20.json > fixtures/resnet20_cost_golden.json

Conventions: a multiply-accumulate is 2 FLOPs, activations are 4 bytes,
weights are packed at bits/8 bytes rounded up per tensor, biases are 4 bytes.
Under the fused traffic model only conv/linear layers move activations.
"""

import json
import math
import sys


def prod(xs):
    return math.prod(xs) if xs else 1


def layer_terms(layer):
    kind, p = layer["kind"], layer["params"]
    ins, outs = prod(layer["input_shape"]), prod(layer["output_shape"])
    if kind == "conv2d":
        per_out = p["kernel_h"] * p["kernel_w"] * p["in_channels"] // p["groups"]
        weights = p["out_channels"] * per_out
        bias = p["out_channels"] if layer.get("bias") else 0
        return 2 * per_out * outs, weights, bias, ins
    if kind == "linear":
        weights = p["in_features"] * p["out_features"]
        bias = p["out_features"] if layer.get("bias") else 0
        return 2 * weights, weights, bias, ins
    flops = {
        "batchnorm2d": 2 * outs,
        "relu": outs,
        "add": outs,
        "global_avg_pool": ins,
        "flatten": 0,
    }.get(kind)
    if kind == "avgpool2d":
        flops = outs * p["kernel"] ** 2
    reads = 2 * ins if kind == "add" else ins
    return flops, 0, 0, reads


def cost(manifest, bits, batch, fused):
    flops = total = 0
    for layer in manifest["layers"]:
        f, w, b, reads = layer_terms(layer)
        flops += f * batch
        quantizable = layer["kind"] in ("conv2d", "linear")
        if w:
            total += math.ceil(w * bits / 8) + 4 * b
        if quantizable or not fused:
            total += 4 * batch * (reads + prod(layer["output_shape"]))
    return flops, total


def main():
    manifest = json.load(open(sys.argv[1]))
    out = {"model": manifest["name"], "entries": []}
    for traffic in ("fused", "unfused"):
        for batch in (1, 8):
            for bits in (32, 8, 4):
                f, b = cost(manifest, bits, batch, traffic == "fused")
                out["entries"].append(
                    {"traffic": traffic, "batch": batch, "bits": bits, "flops": f, "bytes": b, "ai": f / b}
                )
    json.dump(out, sys.stdout, indent=1)
    print()


if __name__ == "__main__":
    main()

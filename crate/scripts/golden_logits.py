"""Reference logits and accuracy from an independent float64 torch forward.

    python scripts/golden_logits.py --model fixtures/mini_resnet.json \
        --data fixtures/mini_resnet_eval.aiqd --count 16 --out fixtures/mini_resnet_golden.json

Weights are fake-quantized per tensor (symmetric, restricted range, round half
away from zero) for each uniform bit-width before the forward pass.
"""

import argparse
import json

import numpy as np
import torch

import aiqfmt


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", required=True)
    ap.add_argument("--weights")
    ap.add_argument("--data", required=True)
    ap.add_argument("--count", type=int, default=16, help="samples whose logits are stored")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    manifest = json.load(open(args.model))
    weights = aiqfmt.read_aiqw(args.weights or args.model.rsplit(".", 1)[0] + ".aiqw")
    x, y = aiqfmt.read_aiqd(args.data)
    x = torch.tensor(aiqfmt.normalize(manifest, x), dtype=torch.float64)
    y = torch.tensor(y)

    golden = {"model": manifest["name"], "samples": len(y), "count": args.count, "schemes": {}}
    for bits in (32, 8, 4):
        w = {k: v.copy() for k, v in weights.items()}
        for layer in aiqfmt.quantizable(manifest):
            w[layer["weight"]] = aiqfmt.fake_quant(w[layer["weight"]], bits)
        net = aiqfmt.ManifestNet(manifest, {k: v.astype(np.float64) for k, v in w.items()}).double().eval()
        with torch.no_grad():
            logits = torch.cat([net(x[i : i + 256]) for i in range(0, len(x), 256)])
        pred = logits.argmax(1)
        # Margin between the top two logits flags samples whose prediction
        # could flip under float32 rounding.
        top2 = logits.topk(2, dim=1).values
        golden["schemes"][str(bits)] = {
            "accuracy": (pred == y).double().mean().item(),
            "min_margin": (top2[:, 0] - top2[:, 1]).min().item(),
            "logits": logits[: args.count].tolist(),
        }
        print(f"{bits}-bit accuracy {golden['schemes'][str(bits)]['accuracy']:.4f}")
    with open(args.out, "w") as f:
        json.dump(golden, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main()

"""Trains a manifest-described model on an AIQD dataset and writes AIQW weights.

    python scripts/train_fixture.py --model fixtures/mini_resnet.json \
        --init init.aiqw --train train.aiqd --test test.aiqd --out fixtures/mini_resnet.aiqw
"""

import argparse
import json

import numpy as np
import torch
import torch.nn.functional as F

import aiqfmt


def accuracy(net, x, y, batch=512):
    net.eval()
    hits = 0
    with torch.no_grad():
        for i in range(0, len(x), batch):
            hits += (net(x[i : i + batch]).argmax(1) == y[i : i + batch]).sum().item()
    return hits / len(x)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", required=True)
    ap.add_argument("--init", required=True, help="initial AIQW weights")
    ap.add_argument("--train", required=True)
    ap.add_argument("--test", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--weight-decay", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    torch.set_num_threads(1)
    manifest = json.load(open(args.model))
    net = aiqfmt.ManifestNet(manifest, aiqfmt.read_aiqw(args.init))
    xtr, ytr = aiqfmt.read_aiqd(args.train)
    xte, yte = aiqfmt.read_aiqd(args.test)
    xtr = torch.tensor(aiqfmt.normalize(manifest, xtr))
    xte = torch.tensor(aiqfmt.normalize(manifest, xte))
    ytr, yte = torch.tensor(ytr), torch.tensor(yte)

    opt = torch.optim.AdamW(net.parameters(), lr=args.lr, weight_decay=args.weight_decay)
    steps = args.epochs * ((len(xtr) + args.batch - 1) // args.batch)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=args.lr, total_steps=steps)
    for epoch in range(args.epochs):
        net.train()
        perm = torch.randperm(len(xtr))
        total = 0.0
        for i in range(0, len(xtr), args.batch):
            idx = perm[i : i + args.batch]
            loss = F.cross_entropy(net(xtr[idx]), ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        print(f"epoch {epoch + 1}: loss {total / len(xtr):.4f} test acc {accuracy(net, xte, yte):.4f}")

    weights = net.export()
    aiqfmt.write_aiqw(args.out, weights)
    w = {k: v.copy() for k, v in weights.items()}
    for bits in (8, 4):
        over = {
            l["weight"]: torch.tensor(aiqfmt.fake_quant(w[l["weight"]], bits)) for l in aiqfmt.quantizable(manifest)
        }
        net.eval()
        with torch.no_grad():
            hits = sum(
                (net(xte[i : i + 512], over).argmax(1) == yte[i : i + 512]).sum().item() for i in range(0, len(xte), 512)
            )
        print(f"uniform int{bits}: test acc {hits / len(xte):.4f}")
    print(f"fp32: test acc {accuracy(net, xte, yte):.4f}")


if __name__ == "__main__":
    main()

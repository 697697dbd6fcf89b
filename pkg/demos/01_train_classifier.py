"""Train the 1024-10-10 roadblock classifier on synthetic glyphs.

Shows the loss curve settling and the held-out accuracy, then saves the
weights so the later demos can pick them up.

    python3 demos/01_train_classifier.py --epochs 300 --out /tmp/demo/model.swf
"""
import argparse
import os

import numpy as np

from semlink import dataset as ds, nn
from semlink.nn import Activation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--per-class", type=int, default=40)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="/tmp/semlink-demo/model.swf")
    args = ap.parse_args()

    data = ds.synth_generate(10, args.per_class, args.sigma, seed=args.seed)
    train, test = ds.shuffle_split(data, 0.2, seed=args.seed)
    print(f"{len(train)} training images, {len(test)} held out, {data.class_count} classes")

    model = nn.init_weights([1024, 10, 10], [Activation.RELU, Activation.SOFTMAX], seed=args.seed)
    model, stats = nn.train(model, train.X, train.labels, args.epochs, 32)
    for s in stats[:: max(1, len(stats) // 6)] + [stats[-1]]:
        print(f"  epoch {s.epoch:4d}  loss {s.loss:.4f}  train acc {s.accuracy:.3f}")

    acc = nn.accuracy(model, test.X, test.labels)
    probs = nn.forward(model, test.X)[0]
    print(f"held-out accuracy {acc:.3f}, mean confidence {np.max(probs, axis=1).mean():.3f}")

    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    nn.save_weights(model, args.out)
    print(f"wrote {args.out} ({os.path.getsize(args.out)} bytes)")


if __name__ == "__main__":
    main()

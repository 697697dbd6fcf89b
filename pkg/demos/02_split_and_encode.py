"""Split a trained classifier at its hidden layer and compare what goes on the wire.

The camera side keeps the first layer and ships a 10-float feature vector;
the receiving side finishes the forward pass. Both paths must agree.

    python3 demos/02_split_and_encode.py --model /tmp/semlink-demo/model.swf
"""
import argparse

import numpy as np

from semlink import codec, dataset as ds, nn, wire
from semlink.wire import Frame, FrameType


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="/tmp/semlink-demo/model.swf")
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    model = nn.load_weights(args.model)
    enc, dec = codec.split_model(model)
    print(f"encoder {enc.model.shape}, decoder {dec.model.shape}")

    data = ds.synth_generate(10, max(1, args.frames // 10), 0.1, seed=args.seed)
    full = np.argmax(nn.forward(model, data.X)[0], axis=1)
    sem_bytes = raw_bytes = agree = 0
    for i, x in enumerate(data.X):
        sff = codec.write_sff(codec.encode_features(enc, x, i))
        cls, _, _ = codec.classify_features(dec, codec.read_sff(sff))
        agree += int(cls == full[i])
        sem_bytes += Frame(FrameType.FEATURES, sff).wire_size
        raw_bytes += Frame(FrameType.RAW_IMAGE, wire.raw_image_payload(x, i)).wire_size

    n = len(data)
    print(f"{agree}/{n} split predictions match the full model")
    print(f"raw frames      {raw_bytes:8d} bytes ({raw_bytes // n} per frame)")
    print(f"semantic frames {sem_bytes:8d} bytes ({sem_bytes // n} per frame)")
    print(f"semantic/raw    {sem_bytes / raw_bytes:.1%}")

    lane, pos = dec.class_map[int(full[0])]
    print(f"frame 0 is class {full[0]}, a roadblock in lane {lane} at x={pos}")


if __name__ == "__main__":
    main()

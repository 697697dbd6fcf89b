"""Stream a 30 s clip to a local decoder server, raw pixels versus features.

Starts the server in-process on a free port, runs both modes and prints
the byte and timing comparison.

    python3 demos/03_wire_benchmark.py --model /tmp/semlink-demo/model.swf
"""
import argparse

import numpy as np

from semlink import codec, dataset as ds, nn, wire
from semlink.traffic import HighwayConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="/tmp/semlink-demo/model.swf")
    ap.add_argument("--scenario", choices=["single", "30s", "60s"], default="30s")
    args = ap.parse_args()

    model = nn.load_weights(args.model)
    enc, dec = codec.split_model(model)
    clip = ds.synth_generate(10, 10, 0.1, seed=21)

    srv = wire.DecoderServer(("127.0.0.1", 0), dec, model, None, HighwayConfig()).start()
    try:
        raw = wire.run_bench(srv.address, clip, args.scenario, "raw")
        sem = wire.run_bench(srv.address, clip, args.scenario, "semantic", encoder=enc)
    finally:
        srv.stop()

    print(wire.comparison_table([raw, sem]))
    same = sum(a == b for a, b in zip(raw.classifications, sem.classifications))
    print(f"{same}/{len(raw.classifications)} frames classified identically by both paths")
    print(f"median per-frame round trip: raw {np.median(raw.per_frame_times) * 1e3:.3f} ms, "
          f"semantic {np.median(sem.per_frame_times) * 1e3:.3f} ms")


if __name__ == "__main__":
    main()

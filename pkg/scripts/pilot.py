"""Throwaway pilot: train small nets briefly to compare capacity choices."""
import json
import sys
import time

from amgformer.losses import LossConfig
from amgformer.network import NetConfig
from amgformer.phantoms import PhantomSpec
from amgformer.training import TrainSettings, train


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
    for c1 in (4, 2):
        t0 = time.perf_counter()
        out = train(
            NetConfig(base_channels=c1),
            PhantomSpec(),
            LossConfig(),
            TrainSettings(steps=steps, batch=2, seed=0, out_dir=f"runs/pilot_c{c1}"),
        )
        dt = time.perf_counter() - t0
        print(json.dumps({"c1": c1, "seconds": round(dt, 1), **out}), flush=True)


if __name__ == "__main__":
    main()

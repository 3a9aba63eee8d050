"""Throwaway probe: does a higher learning rate fix the slow 300-step start?"""
import json
import os
import time

from amgformer.losses import LossConfig
from amgformer.network import NetConfig
from amgformer.phantoms import PhantomSpec
from amgformer.training import TrainSettings, train


def main():
    while not os.path.exists("runs/pilot_c2/final.ckpt"):
        time.sleep(10)
    for c1 in (4, 2):
        t0 = time.perf_counter()
        out = train(
            NetConfig(base_channels=c1),
            PhantomSpec(),
            LossConfig(),
            TrainSettings(steps=300, batch=2, seed=0, lr=1e-3,
                          out_dir=f"runs/probe_lr_c{c1}"),
        )
        dt = time.perf_counter() - t0
        print(json.dumps({"c1": c1, "lr": 1e-3, "seconds": round(dt, 1), **out}),
              flush=True)


if __name__ == "__main__":
    main()

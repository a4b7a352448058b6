"""Time the compiled kernels against the numpy fallback.

Each backend runs in its own interpreter because the choice is made at
import time. Shapes follow a batch of 16 at the default model size.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit


def measure(repeat):
    import numpy as np

    from crossfuse import kernels as K
    from crossfuse.datagen import GenConfig, generate_dataset
    from crossfuse.model import FusionNet
    from crossfuse.train import Arrays, TrainConfig, step_losses
    from crossfuse.tensor import Tape

    rng = np.random.default_rng(0)
    cases = {}
    x1 = rng.normal(size=(16, 1, 32, 32, 32))
    w1 = rng.normal(size=(4, 1, 3, 3, 3))
    g1 = rng.normal(size=(16, 4, 15, 15, 15))
    x2 = rng.normal(size=(16, 4, 15, 15, 15))
    w2 = rng.normal(size=(8, 4, 3, 3, 3))
    g2 = rng.normal(size=(16, 8, 7, 7, 7))
    cases["conv stage 1 forward"] = lambda: K.conv3d_forward(x1, w1, 2)
    cases["conv stage 1 backward"] = lambda: K.conv3d_backward(x1, w1, g1, 2, False)
    cases["conv stage 2 forward"] = lambda: K.conv3d_forward(x2, w2, 2)
    cases["conv stage 2 backward"] = lambda: K.conv3d_backward(x2, w2, g2, 2, True)

    a, b, v = (rng.normal(size=(16, 256, 4)) for _ in range(3))
    out, p = K.attend_forward(a, b, v, 1.0)
    go = rng.normal(size=out.shape)
    cases["attention forward"] = lambda: K.attend_forward(a, b, v, 1.0)
    cases["attention backward"] = lambda: K.attend_backward(a, b, v, p, go, 1.0)

    arr = Arrays(generate_dataset(GenConfig(n=16, seed=0)))
    cfg = TrainConfig(learn_loss_weights=False)
    model = FusionNet(cfg.model_config(arr.volumes.shape[1:]), seed=0)
    idx = np.arange(16)

    def step():
        with Tape() as tape:
            total, _ = step_losses(model, cfg, arr, idx, np.random.default_rng(0))
        tape.backward(total)
    cases["training step (batch 16)"] = step

    res = {}
    for name, fn in cases.items():
        fn()  # warm up
        res[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
    return K.BACKEND, res


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        backend, res = measure(args.repeat)
        print(json.dumps({"backend": backend, "times": res}))
        return
    results = {}
    for pure in ("0", "1"):
        env = dict(os.environ, CROSSFUSE_PURE_PYTHON=pure)
        proc = subprocess.run([sys.executable, __file__, "--child", "--repeat", str(args.repeat)],
                              env=env, capture_output=True, text=True, check=True)
        out = json.loads(proc.stdout.strip().splitlines()[-1])
        results[out["backend"]] = out["times"]
    if "compiled" not in results:
        print("compiled extension not built; only the fallback was timed")
    names = list(results["python"])
    print(f"{'kernel':28s} {'compiled ms':>12s} {'python ms':>10s} {'speedup':>8s}")
    for name in names:
        py = results["python"][name] * 1e3
        c = results.get("compiled", {}).get(name)
        if c is None:
            print(f"{name:28s} {'-':>12s} {py:10.2f} {'-':>8s}")
        else:
            print(f"{name:28s} {c * 1e3:12.2f} {py:10.2f} {py / (c * 1e3):7.2f}x")


if __name__ == "__main__":
    main()

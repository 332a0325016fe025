"""Compare the numba kernels with their numpy fallbacks.

    python3 benchmarks/bench_kernels.py            # per-kernel table + training step
    python3 benchmarks/bench_kernels.py --json out.json

Kernel shapes follow the default toy config (batch 32, sequence ~3, d=32,
ffn 128, 4 classes). The training-step comparison runs each backend in a
fresh interpreter because the backend is fixed at import time.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from vlroute import _kernels as K


def _inputs(rows: int, rng: np.random.Generator) -> dict:
    d, hidden, vocab = 32, 128, 64
    x = rng.normal(size=(rows, d))
    y = K.softmax_fwd_np(rng.normal(size=(rows, 8)))
    ln_out, xhat, rstd = K.layernorm_fwd_np(x, np.ones(d), np.zeros(d), 1e-5)
    n_params = 4096
    return {
        "softmax_fwd": (rng.normal(size=(rows, 8)),),
        "softmax_bwd": (y, rng.normal(size=y.shape)),
        "layernorm_fwd": (x, np.ones(d), np.zeros(d), 1e-5),
        "layernorm_bwd": (rng.normal(size=x.shape), xhat, rstd, np.ones(d)),
        "gelu_fwd": (rng.normal(size=(rows, hidden)),),
        "gelu_bwd": (rng.normal(size=(rows, hidden)), rng.normal(size=(rows, hidden))),
        "xent": (rng.normal(size=(rows, vocab)), rng.integers(0, vocab, rows), -100),
        "embedding_bwd": (rng.integers(0, vocab, rows), rng.normal(size=(rows, d)), vocab),
        "adamw_update": (rng.normal(size=n_params), rng.normal(size=n_params), np.zeros(n_params),
                         np.zeros(n_params), 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001),
    }


def _time(fn, args, number: int, repeat: int) -> float:
    # fresh copies so in-place kernels (adamw) see comparable state every call
    def call():
        fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])
    call()  # jit warmup
    return min(timeit.repeat(call, number=number, repeat=repeat)) / number * 1e6


def bench_kernels(rows: int, number: int, repeat: int) -> list[dict]:
    rng = np.random.default_rng(0)
    out = []
    for name, args in _inputs(rows, rng).items():
        t_np = _time(K.NUMPY_KERNELS[name], args, number, repeat)
        t_nb = _time(K.NUMBA_KERNELS[name], args, number, repeat) if K.NUMBA_KERNELS else float("nan")
        out.append({"kernel": name, "rows": rows, "numpy_us": t_np, "numba_us": t_nb, "speedup": t_np / t_nb})
    return out


_STEP_SCRIPT = """
import json, time
from vlroute import _kernels
from vlroute.models import ModelConfig, build_model
from vlroute.peft import PeftConfig, inject
from vlroute.tasks import AttributeWorld, gen_qa
from vlroute.training import TrainConfig, train
ds = gen_qa(AttributeWorld(4, 4, 32, 0.1, seed=0), 1000, seed=0)
def run(steps):
    m = inject(build_model(ModelConfig()), PeftConfig(kind="lora", r=4, routing="proj"))
    t0 = time.perf_counter()
    train(m, ds, TrainConfig(steps=steps, log_every=10**9))
    return time.perf_counter() - t0
run(5)
steps = {steps}
print(json.dumps({{"backend": _kernels.BACKEND, "ms_per_step": 1e3 * run(steps) / steps}}))
"""


def bench_training(steps: int) -> list[dict]:
    out = []
    for flag in ("0", "1"):
        env = dict(os.environ, VLROUTE_NO_NUMBA=flag, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1")
        res = subprocess.run([sys.executable, "-c", _STEP_SCRIPT.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=32 * 3, help="rows per kernel call (batch x sequence)")
    p.add_argument("--number", type=int, default=200)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--steps", type=int, default=200, help="training steps per backend (0 to skip)")
    p.add_argument("--json", help="write results here")
    args = p.parse_args(argv)

    kernels = bench_kernels(args.rows, args.number, args.repeat)
    print(f"{'kernel':<15s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for r in kernels:
        print(f"{r['kernel']:<15s} {r['numpy_us']:>10.2f} {r['numba_us']:>10.2f} {r['speedup']:>7.2f}x")
    steps = bench_training(args.steps) if args.steps else []
    for r in steps:
        print(f"training step ({r['backend']}): {r['ms_per_step']:.3f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": kernels, "training": steps}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())

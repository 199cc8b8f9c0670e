"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--no-step]

Each kernel is timed on both backends with the same inputs, and outputs are
checked for equality. Unless ``--no-step`` is given, one condensation outer
step is also timed under each backend (each in a fresh interpreter, since the
backend is fixed at import).
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from dcgm.diffcore import _kernels_py

try:
    from dcgm.diffcore import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

STEP_SNIPPET = """
import json, time
from dcgm.condense import CondenseConfig, condense
from dcgm.dataio import make_toy
from dcgm.diffcore import kernels
from dcgm.nets import ArchSpec
train, _ = make_toy(per_class=100)
cfg = CondenseConfig(K=1, real_batch=64)
condense(train, ArchSpec(), cfg)
t = time.perf_counter()
condense(train, ArchSpec(), cfg.replace(K=2))
print(json.dumps({"backend": kernels.BACKEND, "seconds_per_step": (time.perf_counter() - t) / 2}))
"""


def cases(rng: np.random.Generator) -> dict[str, tuple]:
    x = rng.standard_normal((64, 128, 16, 16)).astype(np.float32)
    small = rng.standard_normal((64, 128, 8, 8)).astype(np.float32)
    _, idx = _kernels_py.maxpool2(x)
    return {
        "im2col3x3": (x[:, :, :8, :8].copy(),),
        "avgpool2": (x,),
        "upsample2": (small,),
        "maxpool2": (x,),
        "pool_gather": (x, idx),
        "pool_scatter": (small, idx),
    }


def bench(repeat: int) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    for name, args in cases(rng).items():
        row = {"kernel": name}
        outs = {}
        for label, mod in (("python", _kernels_py), ("cython", _kernels_c)):
            if mod is None:
                continue
            fn = getattr(mod, name)
            outs[label] = fn(*args)
            row[label] = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))
        if "cython" in outs:
            a, b = outs["python"], outs["cython"]
            a, b = (a if isinstance(a, tuple) else (a,)), (b if isinstance(b, tuple) else (b,))
            row["identical"] = all(np.array_equal(u, v) for u, v in zip(a, b))
            row["speedup"] = row["python"] / row["cython"]
        rows.append(row)
    return rows


def step_timings() -> list[dict]:
    out = []
    for forced in ("0", "1"):
        env = dict(os.environ, DCGM_PURE_PYTHON=forced)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True,
                             check=True)
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-step", action="store_true")
    args = ap.parse_args()
    print(f"{'kernel':<14}{'python ms':>11}{'cython ms':>11}{'speedup':>9}  identical")
    for r in bench(args.repeat):
        cy = r.get("cython")
        cy_ms = "n/a" if cy is None else f"{1e3 * cy:.3f}"
        speed = "" if cy is None else f"{r['speedup']:.2f}x"
        print(f"{r['kernel']:<14}{1e3 * r['python']:>11.3f}{cy_ms:>11}{speed:>9}  {r.get('identical', 'n/a')}")
    if not args.no_step:
        for s in step_timings():
            print(f"condensation outer step ({s['backend']}): {s['seconds_per_step']:.3f} s")


if __name__ == "__main__":
    main()

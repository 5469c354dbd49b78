"""Compiled vs pure-Python interior-point kernel on MPC-shaped QPs.

    python benchmarks/bench_ipm.py [--repeats N] [--sizes H,H,...]

Each QP comes from the constrained 2-state fixture at a state where input
bounds bind, so the full predictor-corrector loop runs.  Reports the median
wall time per solve, the speedup and the largest primal difference between
the two kernels.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from mpcrl.ocp import OCPSpec, assemble_kkt
from mpcrl.ocp import backend


def make_qp(H: int):
    spec = OCPSpec(n=2, m=1, H=H, input_box=True, state_box=True)
    theta = spec.theta(Q=[1.0, 0.5], R=[0.1], A=[[1.0, 0.1], [0.0, 1.0]], B=[[0.005], [0.1]],
                       u_lo=-0.5, u_hi=0.5, x_lo=-5.0, x_hi=5.0)
    return assemble_kkt(spec, theta, np.array([2.0, 1.0]))


def time_kernel(name: str, qp, repeats: int):
    args = (qp.P, qp.p, qp.E, qp.e, qp.G, qp.w, 1e-9, 100)
    out = backend.BACKENDS[name](*args)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        backend.BACKENDS[name](*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--sizes", default="5,10,20,50")
    args = ap.parse_args(argv)
    if "compiled" not in backend.BACKENDS:
        print("compiled kernel not built; run `python setup.py build_ext --inplace` first")
        return
    print(f"{'H':>4} {'vars':>5} {'rows':>5} {'python ms':>10} {'compiled ms':>12} {'speedup':>8} {'iters':>6} {'max |dy|':>10}")
    for H in (int(h) for h in args.sizes.split(",")):
        qp = make_qp(H)
        tp, op = time_kernel("python", qp, args.repeats)
        tc, oc = time_kernel("compiled", qp, args.repeats)
        dy = float(np.max(np.abs(op[0] - oc[0])))
        print(f"{H:>4} {qp.nv:>5} {qp.ni:>5} {1e3 * tp:>10.3f} {1e3 * tc:>12.3f} {tp / tc:>8.1f} {oc[4]:>6} {dy:>10.2e}")


if __name__ == "__main__":
    main()

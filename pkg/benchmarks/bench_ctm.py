"""Compare the compiled and numpy CTM kernels on an ensemble step.

Usage: python3 benchmarks/bench_ctm.py [--members 100] [--cells 20] [--repeat 2000]
"""

import argparse
import timeit

import numpy as np

from uavtse.kernels import BACKENDS
from uavtse.scenario import ScenarioConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--members", type=int, default=100)
    p.add_argument("--cells", type=int, default=20)
    p.add_argument("--repeat", type=int, default=2000)
    args = p.parse_args()

    sc = ScenarioConfig()
    geom, fd = sc.geometry, sc.fd0
    k, m = args.cells, args.members
    rng = np.random.default_rng(0)
    n = rng.uniform(0.0, fd.rho_j, (k, m)) * geom.dx
    v = np.full(k, fd.v_max)
    cr = np.full(k, fd.rho_cr)
    rj = np.full(k, fd.rho_j)
    call = dict(dx=geom.dx, dt=geom.dt, inflow=sc.demand * geom.dt, offramp_cell=k // 2,
                split=sc.offramp_split, open_downstream=True, clamp=False,
                ramp_cap=sc.offramp_capacity * geom.dt)

    ref = None
    for name, fn in sorted(BACKENDS.items()):
        out, _ = fn(n, v, cr, rj, **call)
        if ref is None:
            ref = out
        diff = float(np.max(np.abs(out - ref)))
        t = min(timeit.repeat(lambda: fn(n, v, cr, rj, **call), number=args.repeat, repeat=3))
        print(f"{name:7s} {1e6 * t / args.repeat:9.2f} us/step  ({k} cells x {m} members)"
              f"  max |diff| vs first = {diff:.3g}")
    if "cython" not in BACKENDS:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()

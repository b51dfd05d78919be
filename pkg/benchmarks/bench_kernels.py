"""Compare the compiled kernels with the pure NumPy fallback.

    python benchmarks/bench_kernels.py [--envs 64] [--steps 2000] [--store 20000] [--queries 256]

Reports wall time per call for batched physics stepping (stairs and rough
terrain) and for top-N retrieval, and checks both backends agree bit for bit.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from loopsr import _kernels_py

try:
    from loopsr import _kernels
except ImportError:  # extension not built
    _kernels = None


def physics_inputs(n: int, terrain: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return dict(
        x=rng.uniform(0, 5, n), v=rng.uniform(0, 1.5, n), u=rng.uniform(-1, 1, n),
        terrain=np.full(n, terrain, dtype=np.int8), difficulty=np.full(n, 0.9),
        mass=rng.uniform(0.7, 1.3, n), friction=rng.uniform(0.2, 1.0, n),
        motor=rng.uniform(0.7, 1.3, n), restitution=rng.uniform(0, 0.5, n),
        field_seed=rng.integers(0, 2**63 - 1, n, dtype=np.uint64),
    )


def run_physics(mod, inp, steps: int):
    x, v = inp["x"].copy(), inp["v"].copy()
    args = [inp[k] for k in ("u", "terrain", "difficulty", "mass", "friction", "motor", "restitution", "field_seed")]
    for _ in range(steps):
        mod.physics_step(x, v, *args)
    return x, v


def bench(fn, repeat: int = 3) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--envs", type=int, default=64)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--store", type=int, default=20000)
    ap.add_argument("--queries", type=int, default=256)
    ap.add_argument("--neighbors", type=int, default=16)
    args = ap.parse_args(argv)

    backends = {"python": _kernels_py}
    if _kernels is not None:
        backends["cython"] = _kernels
    else:
        print("compiled extension not available; timing the fallback only")

    rows = []
    for tname, terrain in (("stairs", 3), ("rough", 4)):
        inp = physics_inputs(args.envs, terrain)
        outs = {}
        for name, mod in backends.items():
            outs[name] = run_physics(mod, inp, 10)
            t = bench(lambda mod=mod: run_physics(mod, inp, args.steps))
            rows.append((f"physics_step[{tname}, n={args.envs}]", name, 1e6 * t / args.steps))
        if len(outs) == 2:
            same = all(np.array_equal(a, b) for a, b in zip(outs["python"], outs["cython"]))
            print(f"physics_step[{tname}] backends bit-identical: {same}")

    rng = np.random.default_rng(1)
    sims = np.round(rng.standard_normal((args.queries, args.store)), 3)  # rounding forces ties
    outs = {}
    for name, mod in backends.items():
        outs[name] = mod.topk_rows(sims, args.neighbors)
        t = bench(lambda mod=mod: mod.topk_rows(sims, args.neighbors))
        rows.append((f"topk_rows[{args.queries}x{args.store}, N={args.neighbors}]", name, 1e6 * t / args.queries))
    if len(outs) == 2:
        print(f"topk_rows backends identical: {np.array_equal(outs['python'], outs['cython'])}")

    print(f"{'kernel':44s} {'backend':8s} {'us/call':>10s}")
    for kernel, name, us in rows:
        print(f"{kernel:44s} {name:8s} {us:10.2f}")
    by_kernel: dict = {}
    for kernel, name, us in rows:
        by_kernel.setdefault(kernel, {})[name] = us
    for kernel, d in by_kernel.items():
        if len(d) == 2:
            print(f"speedup {kernel}: {d['python'] / d['cython']:.1f}x")


if __name__ == "__main__":
    main()

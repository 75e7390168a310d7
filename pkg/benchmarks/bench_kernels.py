"""Compare the compiled and pure-Python kernel backends.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the best wall time per kernel and backend, the speed-up, and the
maximum absolute difference between the two backends' outputs.
"""
import argparse
import timeit

import numpy as np

from homoglab import _backend, media, solvers


def _cases(rng):
    n = 3840
    u0 = rng.standard_normal(n)
    af = 1.0 + rng.random(n + 1)
    c1 = 0.3 * rng.standard_normal(n + 1)
    g = np.tanh(rng.standard_normal(2000))
    mask = np.zeros(g.size + 1, dtype=np.int8)
    mask[::40] = 1
    innov = rng.standard_normal(1_000_000)

    def theta_step(k):
        u = u0.copy()
        for _ in range(200):
            k.theta_step(u, af, 0.01, 1e-4)
        return u

    def march_separable(k):
        u = u0.copy()
        out = np.zeros((int(mask.sum()), n))
        k.march_separable(u, af, c1, g, 0.01, 1e-4, 2, mask, out)
        return out

    def ou_recursion(k):
        return k.ou_recursion(0.3, 0.99, innov)

    model = media.make_model("additive")
    path = media.simulate_driver(media.make_driver("ou"), 12.0, 0.01, seed=1)
    dom = solvers.BoxDomain.for_eps(6.0, 0.05)
    dt, _, _ = solvers.step_rule(0.05, 1.0, 0.5, 0.01)

    def solve_fine(name):
        return solvers.solve_fine(model, path, 0.05, 1.0, lambda x: np.exp(-x**2), dom, dt, 0.5,
                                  save_every=80, backend=name).values

    return {"theta_step x200": theta_step, "march_separable 2000 steps": march_separable,
            "ou_recursion 1e6": ou_recursion}, {"solve_fine eps=0.05": solve_fine}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    names = _backend.available()
    kernels, solves = _cases(np.random.default_rng(0))
    print(f"backends: {', '.join(names)}")
    print(f"{'case':<28}" + "".join(f"{n + ' [ms]':>16}" for n in names) + f"{'speed-up':>10}{'max diff':>12}")
    jobs = [(label, lambda n, f=f: f(_backend.get(n))) for label, f in kernels.items()]
    jobs += [(label, f) for label, f in solves.items()]
    for label, fn in jobs:
        times, outs = [], []
        for n in names:
            outs.append(np.asarray(fn(n)))
            times.append(min(timeit.repeat(lambda n=n: fn(n), number=1, repeat=args.repeat)))
        diff = max(float(np.max(np.abs(o - outs[0]))) for o in outs)
        speed = times[-1] / times[0] if len(times) > 1 else 1.0
        print(f"{label:<28}" + "".join(f"{1e3 * t:>16.2f}" for t in times) + f"{speed:>9.1f}x{diff:>12.1e}")


if __name__ == "__main__":
    main()

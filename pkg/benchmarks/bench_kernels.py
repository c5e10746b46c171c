"""Time the likelihood kernels: compiled extension versus numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--n 2000] [--repeat 50]

Both backends evaluate the same cohort; the script checks that their
log-likelihoods and gradients agree before reporting timings.
"""

import argparse
import time

import numpy as np

from ctsurv.kernels import get_backend
from ctsurv.likelihood import CompiledLikelihood
from ctsurv.priors import select_reference_interval
from ctsurv.simulation import SimConfig, TrialGenerator


def _time(fn, repeat):
    fn()
    best = np.inf
    for _ in range(3):
        t = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t) / repeat)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    gen = TrialGenerator(SimConfig(interval_censor_fraction=0.3))
    data = gen.simulate(args.n, np.random.default_rng(args.seed))
    hm = gen.hazard_model()
    params = gen.true_parameters(select_reference_interval(data, gen.grid))

    liks = {}
    for name in ("python", "cython"):
        try:
            liks[name] = CompiledLikelihood(hm, data, kernels=get_backend(name))
        except ImportError:
            print(f"{name}: backend not available")
    if len(liks) == 2:
        a, b = (liks[n].log_likelihood_grad(params) for n in ("python", "cython"))
        assert np.isclose(a[0], b[0], rtol=1e-12)
        assert np.allclose(a[1], b[1], rtol=1e-10, atol=1e-12)

    print(f"cohort: {args.n} subjects, {gen.grid.K} intervals")
    print(f"{'backend':<8} {'loglik ms':>10} {'grad ms':>10}")
    timings = {}
    for name, lik in liks.items():
        t_ll = _time(lambda: lik.log_likelihood(params), args.repeat)
        t_g = _time(lambda: lik.log_likelihood_grad(params), args.repeat)
        timings[name] = (t_ll, t_g)
        print(f"{name:<8} {1e3 * t_ll:>10.3f} {1e3 * t_g:>10.3f}")
    if len(timings) == 2:
        print("speed-up (python / cython): loglik {:.1f}x, grad {:.1f}x".format(
            timings["python"][0] / timings["cython"][0], timings["python"][1] / timings["cython"][1]))


if __name__ == "__main__":
    main()

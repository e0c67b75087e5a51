"""Time the compiled compositing kernels against the numpy fallback.

Renders one synthetic scene forward and backward with each backend and
prints the median wall time per call, plus the max difference between the
two backends' outputs.

    python benchmarks/bench_raster.py [--size 64] [--repeat 5]
"""

import argparse
import time

import numpy as np

from rigidsplat.geometry import SE3Transform
from rigidsplat.splat import BACKEND, image_loss, num_threads, rasterize, rasterize_backward
from rigidsplat.synthgen import SynthConfig, generate


def timed(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times)), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    bundle = generate(SynthConfig(width=args.size, height=args.size, focal=float(args.size)))
    g, K = bundle.gaussians, bundle.K
    cam = SE3Transform.identity()
    target = bundle.rasters["i0"]
    print(f"{len(g)} gaussians, {args.size}x{args.size}, threads={num_threads()}")
    if BACKEND != "cython":
        print("compiled kernels unavailable; only the numpy path can be timed")
    backends = ["python"] + (["cython"] if BACKEND == "cython" else [])
    # one shared image gradient: the oracle blobs reproduce the target almost
    # exactly, so each backend's own L1 signs would differ on rounding noise
    gimg = image_loss(rasterize(g, cam, K).image, target)[1]
    results = {}
    for name in backends:
        fwd_t, out = timed(lambda: rasterize(g, cam, K, backend=name), args.repeat)
        bwd_t, grads = timed(lambda: rasterize_backward(out, gimg), args.repeat)
        results[name] = (out.image, grads)
        print(f"{name:>7}: forward {fwd_t * 1e3:8.2f} ms  backward {bwd_t * 1e3:8.2f} ms")
    if len(results) == 2:
        (ia, ga), (ib, gb) = results["python"], results["cython"]
        dimg = np.abs(ia - ib).max()
        dgrad = max(np.abs(ga[k] - gb[k]).max() for k in ga)
        print(f"max |python - cython|: image {dimg:.2e}, gradients {dgrad:.2e}")


if __name__ == "__main__":
    main()

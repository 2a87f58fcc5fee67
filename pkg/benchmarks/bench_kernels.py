"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from xctbench import kernels
from xctbench.tomo import ScanConfig, fbp_reconstruct, forward_project


def cases(rng):
    n = 64
    img = rng.random((n, n))
    ang = np.linspace(0, np.pi, 180, endpoint=False)
    c, s = np.cos(ang), np.sin(ang)
    sino = kernels.project(img, c, s, 91)
    xp = rng.standard_normal((8, 16, 34, 34))
    cols = kernels.im2col(xp, 3, 1)
    cfg = ScanConfig(n_views=180, noise_model="none")
    return {
        "project 64px x 180 views": lambda be: kernels.project(img, c, s, 91, backend=be),
        "backproject 64px x 180 views": lambda be: kernels.backproject(sino, c, s, n, backend=be),
        "im2col 8x16x34x34 k3": lambda be: kernels.im2col(xp, 3, 1, backend=be),
        "col2im 8x16x34x34 k3": lambda be: kernels.col2im(cols, 16, 34, 34, 3, 1, backend=be),
        "forward + FBP one slice": lambda be: fbp_reconstruct(
            forward_project(img, cfg, backend=be), n, backend=be),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"active backend: {kernels.BACKEND}; comparing {', '.join(backends)}")
    print(f"{'kernel':32s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = []
        for be in backends:
            fn(be)
            times.append(min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat)))
        row = f"{name:32s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()

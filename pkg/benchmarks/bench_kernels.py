"""Time each kernel under the compiled and pure-numpy backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Also times one training-mode forward/backward pass of the default network.
Outputs of the two backends are compared before timing.
"""

import argparse
import json
import timeit

import numpy as np

from curlprune import kernels
from curlprune import tensor as T
from curlprune.nn import ArchConfig, build_tiny_resnet


def cases(rng):
    x = rng.standard_normal((32, 64, 16, 16)).astype(np.float32)
    cols_shape = kernels.BACKENDS["python"].im2col(x, 3, 3, 1, 1).shape
    cols = rng.standard_normal(cols_shape).astype(np.float32)
    x3 = x.reshape(32, 64, -1)
    mean, var = kernels.BACKENDS["python"].bn_stats(x3)
    inv = (1.0 / np.sqrt(var + 1e-5)).astype(np.float32)
    gamma = rng.standard_normal(64).astype(np.float32)
    shift = rng.standard_normal(64).astype(np.float32)
    g3 = rng.standard_normal(x3.shape).astype(np.float32)
    return {
        "im2col 3x3": lambda: kernels.im2col(x, 3, 3, 1, 1),
        "col2im 3x3": lambda: kernels.col2im(cols, x.shape, 3, 3, 1, 1),
        "bn_stats": lambda: kernels.bn_stats(x3),
        "affine": lambda: kernels.affine(x3, gamma, shift),
        "bn_backward": lambda: kernels.bn_backward(g3, x3, mean, inv, gamma, True),
    }


def train_step(net, x):
    def run():
        out = net.forward(T.Tensor(x), training=True)
        T.backward(T.sum_(out))
    return run


def _flatten(out):
    return [np.asarray(o) for o in (out if isinstance(out, tuple) else (out,))]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--json", help="write timings here")
    args = parser.parse_args(argv)
    backends = sorted(kernels.BACKENDS)
    if "compiled" not in backends:
        print("compiled backend not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    bench = cases(rng)
    net = build_tiny_resnet(ArchConfig(), seed=0)
    bench["train step (net)"] = train_step(net, rng.standard_normal((32,) + net.input_shape).astype(np.float32))

    results = {}
    reference = {}
    for name in backends:
        kernels.use_backend(name)
        for label, fn in bench.items():
            if not label.startswith("train"):
                outs = _flatten(fn())
                if label in reference:
                    for a, b in zip(reference[label], outs):
                        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4, err_msg=label)
                else:
                    reference[label] = outs
            fn()  # warm up
            number = 1 if label.startswith("train") else 5
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            results.setdefault(label, {})[name] = best
    kernels.use_backend("compiled" if "compiled" in backends else "python")

    width = max(len(k) for k in results)
    print(f"{'kernel':<{width}}  " + "  ".join(f"{b:>12}" for b in backends) + "  speedup")
    for label, row in results.items():
        cells = "  ".join(f"{row[b] * 1e3:>10.3f}ms" for b in backends)
        speed = row["python"] / row["compiled"] if "compiled" in row else float("nan")
        print(f"{label:<{width}}  {cells}  {speed:6.2f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()

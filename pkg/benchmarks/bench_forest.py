"""Compare the compiled and pure-numpy forest kernels on synthetic anchor features.

    python3 benchmarks/bench_forest.py [--trees 100] [--repeats 3]
"""
import argparse
import time

import numpy as np

from tcnet import forest
from tcnet.anchors import ExtractorParams
from tcnet.io import synth_generate


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - start)
    return min(times), result


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--trees", type=int, default=100)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--per-class", type=int, default=200)
    args = parser.parse_args()

    ds = synth_generate(per_class=args.per_class, seed=0)
    X = forest.extract_rf_features(ds.windows, (32, 128), ExtractorParams.default(sampling_rate=ds.sampling_rate))
    cfg = forest.ForestConfig(n_trees=args.trees, seed=0)
    print(f"data: {X.shape[0]} rows x {X.shape[1]} features, {args.trees} trees, best of {args.repeats}")

    results = {}
    for name in ("compiled", "python"):
        try:
            kernels = forest.backend(name)
        except ImportError:
            print(f"{name:>9}: unavailable (extension not built)")
            continue
        fit_time, model = best_of(lambda: forest.fit_forest(X, ds.labels, cfg, kernels=kernels), args.repeats)
        pred_time, proba = best_of(lambda: forest.predict_proba(model, X, kernels=kernels), args.repeats)
        results[name] = (model, proba)
        print(f"{name:>9}: fit {fit_time * 1e3:8.1f} ms   predict {pred_time * 1e3:8.1f} ms")

    if len(results) == 2:
        same = forest.forest_bytes(results["compiled"][0]) == forest.forest_bytes(results["python"][0])
        print(f"identical forests: {same}; identical probabilities: "
              f"{np.array_equal(results['compiled'][1], results['python'][1])}")


if __name__ == "__main__":
    main()

"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Also times one full training step per backend, which shows how much of a
step the kernels account for.
"""

import argparse
import tempfile
import timeit

import numpy as np

from pignight import kernels


def _cases(quick):
    rng = np.random.default_rng(0)
    h, w = (128, 256) if quick else (512, 1024)
    C = 19
    p = rng.random((C, h, w)).astype(np.float32)
    p /= p.sum(axis=0, keepdims=True)
    q = rng.random((C, h, w)).astype(np.float32)
    q /= q.sum(axis=0, keepdims=True)
    pred = rng.integers(0, C, (h, w))
    truth = rng.choice(np.r_[np.arange(C), 255], (h, w))
    img = rng.random((h // 2, w // 4))
    cm = np.zeros((C, C), dtype=np.int64)
    return {
        f"fuse_labels C={C} {h}x{w}": lambda: kernels.fuse_labels(p, q, [1, 5, 10, 11], [5, 6, 7, 11, 12, 17, 18]),
        f"confusion_accumulate {h}x{w}": lambda: kernels.confusion_accumulate(cm, pred, truth, 255),
        f"class_histogram {h}x{w}": lambda: kernels.class_histogram(truth, C, 255),
        f"window_mean 11x11 on {img.shape[0]}x{img.shape[1]}": lambda: kernels.window_mean(img, 11),
    }


def _train_step_timer(root):
    from pignight import trainer
    from pignight.datamodel import generate_synthetic_dataset
    from pignight.trainer import TrainConfig, draw_batch, init_state, load_train_data, train_step

    generate_synthetic_dataset(root, seed=7, n_samples=4, size=64, n_prompt=4)
    cfg = TrainConfig(source_dir=f"{root}/day", target_dir=f"{root}/night", prompt_dir=f"{root}/prompt")
    data = load_train_data(cfg)
    state = init_state(cfg, trainer._sampler_sizes(data))
    small = cfg.resolve_small_classes(list(data.class_names))
    return lambda: train_step(state, *draw_batch(state, data), small_classes=small)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--quick", action="store_true", help="smaller inputs")
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy fallback is available")
    previous = kernels.BACKEND
    cases = _cases(args.quick)
    print(f"{'kernel':44s} " + " ".join(f"{b:>12s}" for b in backends) + "   speedup")
    for name, fn in cases.items():
        times = {}
        for b in backends:
            kernels.use_backend(b)
            times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        speed = f"{times['python'] / times['cython']:8.1f}x" if "cython" in times else ""
        print(f"{name:44s} " + " ".join(f"{times[b] * 1e3:10.2f}ms" for b in backends) + f"  {speed}")

    with tempfile.TemporaryDirectory() as tmp:
        step = _train_step_timer(tmp)
        step()  # warm caches
        times = {}
        for b in backends:
            kernels.use_backend(b)
            times[b] = min(timeit.repeat(step, number=1, repeat=args.repeat))
        print(f"{'train_step 64x64 C=8 (whole step)':44s} " +
              " ".join(f"{times[b] * 1e3:10.2f}ms" for b in backends))
    kernels.use_backend(previous)


if __name__ == "__main__":
    main()

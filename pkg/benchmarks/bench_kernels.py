"""Compare the compiled and numpy kernel backends.

Times the fused LSTM pointwise step (forward and backward), the gate
activations, and one full training epoch of the desk-scale adding task.

    python benchmarks/bench_kernels.py [--repeat 200] [--epoch]
"""
import argparse
import statistics
import time

import numpy as np

from hlstm import kernels
from hlstm.cells import CellSpec
from hlstm.gptrain import new_run, train_epoch
from hlstm.optim import LrSchedule, OptimizerState
from hlstm.sparsity import GpSchedule
from hlstm.tasks import Task


def timeit(fn, repeat):
    fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def kernel_cases(batch, n, rng):
    pre = rng.normal(size=(batch, 4 * n))
    c_prev = rng.normal(size=(batch, n))
    x = rng.normal(size=(batch, 4 * n))

    def cases(k):
        gates, c, tanh_c, _ = k.lstm_pointwise_forward(pre, c_prev)
        dc, dh = rng.normal(size=(batch, n)), rng.normal(size=(batch, n))
        y = k.act_forward(kernels.LEAKY_RELU, x, 0.01)
        return {
            "lstm forward": lambda: k.lstm_pointwise_forward(pre, c_prev),
            "lstm backward": lambda: k.lstm_pointwise_backward(dc, dh, gates, c_prev, tanh_c),
            "sigmoid": lambda: k.act_forward(kernels.SIGMOID, x, 0.0),
            "leaky_relu backward": lambda: k.act_backward(kernels.LEAKY_RELU, x, y, x, 0.01),
        }

    return cases


def epoch_time(backend):
    previous = kernels.use_backend(backend)
    try:
        task = Task("adding", length=30, n_train=512, n_eval=64, seed=0)
        spec = CellSpec("hlstm", 2, 32, (32,), io_dropout=0.0, hidden_dropout=0.0)
        run = new_run(spec, task, GpSchedule(), OptimizerState(lr=3e-3), LrSchedule(base_lr=3e-3), 32, 0)
        ds = task.dataset("train")
        t0 = time.perf_counter()
        train_epoch(run, ds)
        return time.perf_counter() - t0
    finally:
        kernels.use_backend(previous)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--epoch", action="store_true", help="also time a training epoch per backend")
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'case':<22}{'shape':>10}" + "".join(f"{b:>14}" for b in backends) + "   speedup")
    for batch, n in ((32, 32), (128, 128), (512, 256)):
        cases = kernel_cases(batch, n, rng)
        per_backend = {b: cases(kernels.get_backend(b)) for b in backends}
        for name in per_backend[backends[0]]:
            times = {b: timeit(per_backend[b][name], args.repeat) for b in backends}
            ratio = times["python"] / times[backends[0]]
            cells = "".join(f"{times[b] * 1e6:11.1f} us" for b in backends)
            print(f"{name:<22}{f'{batch}x{n}':>10}{cells}   {ratio:6.2f}x")
    if args.epoch:
        for b in backends:
            print(f"training epoch ({b}): {epoch_time(b):.3f} s")


if __name__ == "__main__":
    main()

"""Time the numba and numpy versions of each hot kernel on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 128]

The first numba call compiles (or loads the on-disk cache); it is excluded
from the timings by a warm-up call.
"""
import argparse
import timeit

import numpy as np

from popgrad import _kernels as K


def cases(batch, rng):
    x1 = rng.random((batch, 1, 28, 28))
    w1 = rng.standard_normal((8, 1, 3, 3))
    x2 = rng.random((batch, 8, 14, 14))
    w2 = rng.standard_normal((16, 8, 3, 3))
    dout2 = rng.standard_normal((batch, 16, 14, 14))
    pooled, arg = K.maxpool2x2_forward_numpy(x2)
    dpool = rng.standard_normal(pooled.shape)
    dx = rng.integers(-2, 3, batch)
    dy = rng.integers(-2, 3, batch)
    return {
        "conv fwd 1->8 @28": (K.conv2d_forward_numpy, K.conv2d_forward_numba, (x1, w1, np.zeros(8))),
        "conv fwd 8->16 @14": (K.conv2d_forward_numpy, K.conv2d_forward_numba, (x2, w2, np.zeros(16))),
        "conv bwd 8->16 @14": (K.conv2d_backward_numpy, K.conv2d_backward_numba, (x2, w2, dout2)),
        "maxpool fwd @14": (K.maxpool2x2_forward_numpy, K.maxpool2x2_forward_numba, (x2,)),
        "maxpool bwd @14": (K.maxpool2x2_backward_numpy, K.maxpool2x2_backward_numba,
                            (dpool, arg, x2.shape)),
        "shift reflection @28": (K.shift_pad_numpy, K.shift_pad_numba,
                                 (x1, dx, dy, K.PAD_REFLECTION)),
    }


def best_ms(fn, args, repeat):
    return 1000 * min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (slow, fast, inputs) in cases(args.batch, rng).items():
        fast(*inputs)  # compile / load cache
        t_np = best_ms(slow, inputs, args.repeat)
        t_nb = best_ms(fast, inputs, args.repeat)
        print(f"{name:<22} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()

"""Time the numba loop kernels against the numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes follow one training step of the toy model (batch 32, sequence 24,
hidden 64, ff 256, 4 heads). The first numba call compiles (or loads the
on-disk cache) and is excluded from the timings.
"""
import argparse
import timeit

import numpy as np

from binmask import _kernels as K


def cases(rng):
    b, s, d, f, h = 32, 24, 64, 256, 4
    x_ff = rng.standard_normal((b, s, f)).astype(np.float32)
    x_d = rng.standard_normal((b, s, d)).astype(np.float32)
    att = rng.standard_normal((b, h, s, s)).astype(np.float32)
    gain = np.ones(d, np.float32)
    bias = np.zeros(d, np.float32)
    w = rng.standard_normal((d, f)).astype(np.float32)
    sc = rng.random((d, f)).astype(np.float32)
    bits = (rng.random(768 * 768) < 0.5).astype(np.uint8)
    packed = K.pack_bits(bits, use_numba=False)
    _, cdf = K.gelu(x_ff, use_numba=False)
    y_att = K.softmax_lastdim(att, use_numba=False)
    _, xhat, rstd = K.layer_norm_lastdim(x_d, gain, bias, 1e-12, use_numba=False)
    return {
        "softmax": lambda u: K.softmax_lastdim(att, use_numba=u),
        "softmax_bwd": lambda u: K.softmax_lastdim_bwd(y_att, att, use_numba=u),
        "layer_norm": lambda u: K.layer_norm_lastdim(x_d, gain, bias, 1e-12, use_numba=u),
        "layer_norm_bwd": lambda u: K.layer_norm_lastdim_bwd(x_d, xhat, rstd, gain, use_numba=u),
        "gelu": lambda u: K.gelu(x_ff, use_numba=u),
        "gelu_bwd": lambda u: K.gelu_bwd(x_ff, cdf, x_ff, use_numba=u),
        "masked_weight": lambda u: K.masked_weight(w, sc, 0.5, use_numba=u),
        "pack_bits_768x768": lambda u: K.pack_bits(bits, use_numba=u),
        "unpack_bits_768x768": lambda u: K.unpack_bits(packed, bits.size, use_numba=u),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if not K._HAVE_NUMBA:
        print("numba is not importable; only the numpy path can run")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fn in cases(rng).items():
        fn(True)  # compile / load cache
        t_nb = min(timeit.repeat(lambda: fn(True), number=1, repeat=args.repeat)) * 1e3
        t_np = min(timeit.repeat(lambda: fn(False), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22}{t_nb:>10.3f}{t_np:>10.3f}{t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()

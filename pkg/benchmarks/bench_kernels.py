"""Time the compiled kernels against the pure-Python fallback.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat N]``

Each kernel runs on the same seeded inputs under both backends; outputs are
checked for equality before timing so a speed-up never hides a mismatch.
"""

import argparse
import timeit

import numpy as np

from jointist import _kernels_py

try:
    from jointist import _kernels as _compiled
except ImportError:
    _compiled = None


def make_inputs(rng):
    n_frames, n_pitches = 30_000, 88      # five minutes at 100 frames per second
    notes = []
    for col in range(n_pitches):
        t = 0
        while True:
            on = t + int(rng.integers(1, 200))
            off = on + int(rng.integers(1, 100))
            if off > n_frames:
                break
            notes.append((col, on, off))
            t = off
    notes = np.array(notes, dtype=np.int64)
    onset, frame = _kernels_py.render_notes(notes, n_frames, n_pitches)
    noise = rng.random((n_frames, n_pitches)).astype(np.float32) * 0.4
    onset_post = np.clip(onset * 0.7 + noise, 0, 1)
    frame_post = np.clip(frame * 0.7 + noise, 0, 1)
    adjacency = rng.random((400, 400)) < 0.02
    return {
        "render_notes": (notes, n_frames, n_pitches),
        "decode_rolls": (onset_post, frame_post, 0.5, 0.5),
        "max_matching": (adjacency,),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    inputs = make_inputs(np.random.default_rng(0))
    print(f"{'kernel':<14}{'python (s)':>12}{'compiled (s)':>14}{'speed-up':>10}")
    for name, call_args in inputs.items():
        py = getattr(_kernels_py, name)
        t_py = min(timeit.repeat(lambda: py(*call_args), number=1, repeat=args.repeat))
        if _compiled is None:
            print(f"{name:<14}{t_py:>12.4f}{'n/a':>14}{'n/a':>10}")
            continue
        fast = getattr(_compiled, name)
        if name != "max_matching" and not same(py(*call_args), fast(*call_args)):
            raise SystemExit(f"{name}: backends disagree")
        if name == "max_matching" and len(py(*call_args)) != len(fast(*call_args)):
            raise SystemExit(f"{name}: matching sizes differ")
        t_c = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat))
        print(f"{name:<14}{t_py:>12.4f}{t_c:>14.4f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()

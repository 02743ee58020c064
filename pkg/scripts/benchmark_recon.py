"""Reconstruction throughput on a synthetic event stream.

Builds a time-ordered stream of uniformly scattered events and pushes it
through the leaky integrator in chunks, reporting events per second. The
first chunk is run once beforehand so numba compilation is not timed.

    python -m scripts.benchmark_recon                       # 10M events, 320x180
    python -m scripts.benchmark_recon --events 2000000 --bands 4

Single-band runs are the reference figure; --bands > 1 updates horizontal
bands from a thread pool.
"""

import argparse
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from app.models.recording import EVENT_DTYPE  # noqa: E402
from app.services.recon_service import ReconState  # noqa: E402


def synthetic_events(n: int, width: int, height: int, rate_hz: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    events = np.zeros(n, dtype=EVENT_DTYPE)
    events["t"] = np.cumsum(rng.exponential(1e9 / rate_hz, n)).astype(np.uint64)
    events["x"] = rng.integers(0, width, n)
    events["y"] = rng.integers(0, height, n)
    events["p"] = rng.integers(0, 2, n)
    return events


def run(events: np.ndarray, width: int, height: int, chunk: int, bands: int) -> float:
    with ThreadPoolExecutor(max_workers=bands) as pool:
        ReconState(width, height, bands=bands, pool=pool).update(events[:min(chunk, len(events))])

        state = ReconState(width, height, bands=bands, pool=pool)
        started = time.perf_counter()
        for start in range(0, len(events), chunk):
            state.update(events[start:start + chunk])
        state.decay_to(int(events["t"][-1]))
        return time.perf_counter() - started


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--events", type=int, default=10_000_000)
    parser.add_argument("--width", type=int, default=320)
    parser.add_argument("--height", type=int, default=180)
    parser.add_argument("--chunk", type=int, default=1 << 20, help="events per update call")
    parser.add_argument("--bands", type=int, default=1, help="horizontal bands (threads)")
    parser.add_argument("--rate", type=float, default=5e6, help="synthetic event rate, events/s")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if args.events < 1 or args.chunk < 1 or args.bands < 1:
        parser.error("--events, --chunk and --bands must be >= 1")

    events = synthetic_events(args.events, args.width, args.height, args.rate, args.seed)
    elapsed = run(events, args.width, args.height, args.chunk, args.bands)

    print(f"{args.events} events on {args.width}x{args.height}, {args.bands} band(s): "
          f"{elapsed:.3f} s, {args.events / elapsed / 1e6:.2f} M events/s")
    return 0


if __name__ == "__main__":
    sys.exit(main())

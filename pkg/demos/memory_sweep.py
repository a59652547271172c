"""How far back does training load matter? A memory-horizon sweep.

For horizons from 1 to 100 days the sweep regresses a daily fitness
target on the trailing sum of daily load and reports the holdout RMSE with
its standard error. Two generators are compared:

* stationary: load is i.i.d. and fitness is a noisy constant with a weak
  same-day effect, so no horizon should win by more than sampling noise;
* 42-day memory: fitness follows a 42-day load average, so error should
  fall until the horizon reaches the true memory and then level off.

Run:  python3 demos/memory_sweep.py
"""

import numpy as np

from hse.learner import memory_sweep, trailing_aggregate

HORIZONS = [1, 5, 10, 20, 30, 42, 60, 80, 100]


def show(title: str, load: np.ndarray, target: np.ndarray) -> None:
    rows = memory_sweep(load, target, HORIZONS)
    best = min(rows, key=lambda r: r.test_rmse)
    print(title)
    print(f"  {'horizon':>7} {'test RMSE':>10} {'± 2 SE':>8}")
    for r in rows:
        overlap = abs(r.test_rmse - best.test_rmse) <= 2 * (r.stderr + best.stderr)
        print(f"  {r.horizon:>7} {r.test_rmse:10.3f} {2 * r.stderr:8.3f}  {'~best' if overlap else ''}")
    print()


def main() -> None:
    rng = np.random.default_rng(21)
    days = 1200
    load = rng.gamma(2.0, 30.0, days)
    show("stationary generator", load, 45 + 0.01 * load + rng.normal(0, 2.0, days))
    memory = trailing_aggregate(load, 42, "mean")
    memory[:41] = memory[41]
    show("42-day memory generator", load, 30 + 0.25 * memory + rng.normal(0, 0.5, days))


if __name__ == "__main__":
    main()

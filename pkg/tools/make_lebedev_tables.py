"""Regenerate the embedded Lebedev tables in src/emgest/data/.

The node/weight values come from ``scipy.integrate.lebedev_rule``
(SciPy >= 1.15), which implements the Lebedev-Laikov construction.
This script is only needed to refresh the shipped files; the library
itself never imports scipy for quadrature.
"""
from pathlib import Path

import numpy as np
from scipy.integrate import lebedev_rule

# point count -> exact polynomial degree
ORDERS = {6: 3, 26: 7, 110: 17, 590: 41}

OUT = Path(__file__).resolve().parents[1] / "src" / "emgest" / "data"


def main():
    for count, degree in ORDERS.items():
        x, w = lebedev_rule(degree)
        assert x.shape[1] == count, (count, x.shape)
        x = x.T / np.linalg.norm(x.T, axis=1, keepdims=True)
        w = w * (4.0 * np.pi / w.sum())
        path = OUT / f"lebedev_{count:04d}.txt"
        with open(path, "w") as fh:
            fh.write(f"# Lebedev grid: {count} nodes, exact to degree {degree}\n")
            fh.write("# source: scipy.integrate.lebedev_rule, weights scaled to sum 4*pi\n")
            fh.write("# x y z weight\n")
            for (a, b, c), wi in zip(x, w):
                fh.write(f"{a:+.17e} {b:+.17e} {c:+.17e} {wi:.17e}\n")
        print("wrote", path)


if __name__ == "__main__":
    main()

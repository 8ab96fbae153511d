"""Reference values of E_{a,b}(-x) by high-precision power series (mpmath).

Writes crates/core/tests/data/ml_reference.csv with columns alpha,beta,x,value.
"""
import sys
from pathlib import Path

import mpmath as mp


def ml_series(a, b, x):
    r = x ** (1 / a)
    mp.mp.dps = int(40 + 1.2 * float(r) / 2.302585)
    a, b, x = mp.mpf(a), mp.mpf(b), mp.mpf(x)
    total = mp.mpf(0)
    k = 0
    term_scale = mp.mpf(1)
    while True:
        term = (-x) ** k * mp.rgamma(a * k + b)
        total += term
        if a * k + b > r + 5 and abs(term) < mp.mpf(10) ** (-mp.mp.dps + 5) * max(abs(total), term_scale * mp.mpf(10) ** -30):
            break
        k += 1
    return total


def main(out):
    alphas = [0.1, 0.3, 0.5, 0.7, 0.9, 0.999, 1.0, 1.001, 1.1, 1.3, 1.5, 1.7, 1.95, 2.0]
    rows = []
    for a in alphas:
        betas = sorted({round(a, 6), 1.0, round(a + 1, 6), 0.4, 2.5, round(2 * a + 1, 6)})
        for b in betas:
            xs = []
            for e in range(-30, 61):
                x = 10 ** (e / 10)
                if x ** (1 / a) <= 160:
                    xs.append(x)
            for x in xs:
                v = ml_series(a, b, x)
                rows.append(f"{a!r},{b!r},{x!r},{mp.nstr(v, 25)}")
    Path(out).write_text("alpha,beta,x,value\n" + "\n".join(rows) + "\n")
    print(len(rows), "rows")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/data/ml_reference.csv")

"""Regenerate src/loadshaper/data/sample_day.csv.

One synthetic household day at 6-second cadence: base draw, morning and
evening peaks, a soft midday bump and two small periodic ripples. The curve
is a fixed closed-form expression (no RNG), so the file is reproducible
bit for bit; readings are rounded to 4 decimals and strictly positive.
"""

import csv
import math
from pathlib import Path

ROWS = 14400  # 24 h at 6 s
OUT = Path(__file__).resolve().parent.parent / "src" / "loadshaper" / "data" / "sample_day.csv"


def demand_kw(hour: float) -> float:
    kw = 0.32
    kw += 1.25 * math.exp(-0.5 * ((hour - 7.7) / 0.85) ** 2)
    kw += 2.05 * math.exp(-0.5 * ((hour - 18.4) / 1.35) ** 2)
    kw += 0.38 * math.exp(-0.5 * ((hour - 13.0) / 2.2) ** 2)
    kw += 0.06 * math.sin(2.0 * math.pi * hour / 3.0)
    kw += 0.04 * math.sin(2.0 * math.pi * hour / 0.5 + 1.0)
    return round(kw, 4)


def main() -> None:
    with open(OUT, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "kw"])
        for i in range(ROWS):
            writer.writerow([i, f"{demand_kw(i * 6.0 / 3600.0):.4f}"])
    print(f"wrote {OUT} ({ROWS} rows)")


if __name__ == "__main__":
    main()

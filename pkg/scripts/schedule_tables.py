#!/usr/bin/env python3
"""Print the timestep/resolution schedules and the analytic speedup table
for the three large-model presets plus the desk-scale default."""
import sys

from crossres.cli import main as cli


def run() -> int:
    for preset in ("sdxl-like", "sd35-like", "wan-like", "toy-default"):
        print(f"\n=== schedule: {preset} ===")
        code = cli(["schedule", "--preset", preset])
        if code != 0:
            return code
    print("\n=== analytic speedups ===")
    return cli(["cost"])


if __name__ == "__main__":
    sys.exit(run())

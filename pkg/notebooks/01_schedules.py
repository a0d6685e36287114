"""
Replacement-rate curves
=======================

Each curve maps training progress to a multiplier in [0, 1]. The rate used
at epoch i is start + (end - start) * curve(i / total).
"""

import math

from curricle import schedules
from curricle.schedules import ScheduleSpec

total = 40

# the four curves, sampled every 5 epochs, ramping from 0 to 1
print("epoch  " + "  ".join(f"{k:>12}" for k in schedules.KINDS))
for e in range(0, total + 1, 5):
    row = [schedules.rate(ScheduleSpec(k, 0.0, 1.0, total), e) for k in schedules.KINDS]
    print(f"{e:5d}  " + "  ".join(f"{r:12.5f}" for r in row))

# exp_increase holds almost all of its mass back until late in training.
# at the midpoint it sits at 2 / (e^5 + 1), a little above 1% of the end rate
half = schedules.rate(ScheduleSpec("exp_increase", 0.0, 1.0, total), total // 2)
print("\nexp_increase at half time:", half, "=", 2 / (math.exp(5) + 1))

# the first epoch whose rate passes 1% of the end value
first = next(e for e in range(total + 1)
             if schedules.rate(ScheduleSpec("exp_increase", 0.0, 1.0, total), e) >= 0.01)
print("first epoch at >= 1% of end:", first, "of", total)

# a pair of schedules drives one training run: prediction feedback (epsilon)
# and neighbour replacement (gamma)
ss = ScheduleSpec("scurve", 0.0, 0.5, total)
nn = ScheduleSpec("scurve", 0.0, 0.2, total)
for e in (0, 10, 20, 30, 39):
    print(e, schedules.rate_pair(ss, nn, e))

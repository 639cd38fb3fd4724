"""How the acceptance protocol changes the value of notifying several drivers."""

import numpy as np

from nedispatch import BA, FA, KAccept, marginal_gain, mc_value_oracle, value

# One rider, three candidate drivers: (match score, acceptance probability).
offers = [(0.9, 0.3), (0.6, 0.7), (0.2, 0.9)]

for proto in (FA, KAccept(2), BA):
    exact = value(proto, offers)
    mean, se = mc_value_oracle(proto, offers, 200_000, seed=1)
    print(f"{str(proto):>4}: exact {exact:.4f}  simulated {mean:.4f} +- {se:.4f}")

# Under first-accept, a low-score but eager driver can hurt.
print("FA gain of adding (0.1, 0.9) to [(1, 0.9)]:", round(marginal_gain(FA, [(1.0, 0.9)], (0.1, 0.9)), 4))
print("BA gain of the same driver:               ", round(marginal_gain(BA, [(1.0, 0.9)], (0.1, 0.9)), 4))

# Value as the notification set grows, drivers added in random order.
rng = np.random.default_rng(0)
pool = [(float(w), float(p)) for w, p in zip(rng.random(6), rng.uniform(0.2, 0.9, 6))]
for n in range(1, 7):
    row = "  ".join(f"{value(proto, pool[:n]):.3f}" for proto in (FA, KAccept(2), BA))
    print(f"|S|={n}: FA/k2/BA {row}")

"""Fluid steady state, rider outcome chain, and the self-consistent profile."""

from nedispatch.core import MarketParams
from nedispatch.fixpoint import FixpointConfig, find_equilibrium
from nedispatch.fluid import absorption_metrics, build_generator, equilibrium

params = MarketParams(lambda_r=1.2, lambda_d=1.0, mu=0.1, p=0.4, eta=0.01, eta_idle=0.01, eta_notified=0.0, cap_u=3)
profile = (0.1, 0.5, 0.3, 0.1)

for proto in ("FA", "BA"):
    state = equilibrium(proto, params, profile)
    chain = absorption_metrics(build_generator(proto, params, profile))
    print(
        f"{proto}: waiting riders {state.r0:.3f}, idle drivers {state.d0:.3f}, "
        f"match prob {chain.match_prob[0]:.3f}, mean time to match {chain.cond_match_time[0]:.2f}"
    )

# Iterate profile -> state -> packed snapshots -> profile until it stops moving.
trace = find_equilibrium("FA", params, "opt", FixpointConfig(n_snapshot_samples=400, max_iter=20), (0.5, 0.5, 0.0, 0.0))
for rec in trace.iterations:
    print(f"iter q={[round(x, 3) for x in rec.q]} R0={rec.r0:.3f} D0={rec.d0:.3f} gap={rec.gap:.4f}")
print("converged:", trace.converged)

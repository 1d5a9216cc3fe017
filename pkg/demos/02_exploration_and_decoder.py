"""
Reward-free exploration and the decoder fit
===========================================

Runs the first stage alone: a homing learner per terminal state, the
reachable set, tuple collection and the ERM posterior fit.
"""

# %%
# Homing policies
# ---------------
# Each learner runs 5000 optimistic episodes towards its target.  Its own
# hit rate is the visitation estimate used to decide reachability.
import numpy as np

from iglmdp import ExperimentConfig, run_full_pipeline
from iglmdp.env import max_reach_probability

cfg = ExperimentConfig()
report = run_full_pipeline(cfg, seed=0, stop_after="erm")
env = report.env
labels = env.mdp.state_labels

for s, p in zip(report.visitation.states, report.visitation.p_hat):
    print(f"{labels[s]}: hit rate {p:.4f} (best possible {max_reach_probability(env, s):.2f})")
print(f"concentration width beta = {report.visitation.beta:.4f}")
print("reachable:", sorted(labels[s] for s in report.reachable.states))

# %%
# ERM
# ---
# The finite class pairs interpolated reward candidates with every binary
# decoder on (context, symbol).  With 5000 tuples per state the true
# posterior is usually recovered exactly.
for s, h in sorted(report.hypotheses.items()):
    print(f"{labels[s]}: f#{h.f_index} phi#{h.phi_index} matches truth={report.is_true[s]} "
          f"risk={report.risks[s]:.3g}")
print("episodes used:", report.phase_episodes)

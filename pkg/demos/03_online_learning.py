"""
Learning a policy from decoded feedback
=======================================

The full run on the synthetic chain.  Prints the running averages that the
reward curves are drawn from, so any plotter can reproduce them from the
CSV this script writes.
"""

# %%
# Run
# ---
# 40000 online episodes take about ten seconds.
import sys
from pathlib import Path

import numpy as np

from iglmdp import ExperimentConfig, run_full_pipeline
from iglmdp.pipeline import emit_metrics

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
report = run_full_pipeline(ExperimentConfig(), seed)
m = report.metrics

# %%
# Curves
# ------
# Decoded rewards stay slightly below the true ones: the decoder never
# over-estimates on the informative state.
t = np.arange(1, len(m) + 1)
true_avg = np.cumsum(m.true_reward) / t
dec_avg = np.cumsum(np.nan_to_num(m.decoded_reward)) / np.maximum(np.cumsum(~np.isnan(m.decoded_reward)), 1)
for k in (1000, 5000, 10000, 20000, 40000):
    print(f"episode {k:>5}: true {true_avg[k - 1]:.4f}  decoded {dec_avg[k - 1]:.4f}  "
          f"regret/episode {m.cumulative_regret[k - 1] / k:.4f}")
print(f"final 2000 episodes: {m.true_reward[-2000:].mean():.4f} (V* = {m.v_star:.3f})")

out = Path("runs") / f"demo-seed-{seed}"
emit_metrics(report, out)
print("wrote", out.resolve())

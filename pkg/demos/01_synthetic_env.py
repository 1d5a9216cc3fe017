"""
The synthetic good/bad chain
============================

Builds the three-layer environment, evaluates the optimal policy exactly and
looks at what the learner can infer from feedback alone: the posterior of a
uniformly drawn final action given the feedback symbol, and the reward the
Lipschitz decoder reads off it.
"""

# %%
# The model
# ---------
# Two contexts; under "False" the feedback bit is the complement of the reward.
import numpy as np

from iglmdp import build_synthetic_env, env_constants, optimal_value
from iglmdp.decoder import decode, true_posterior_table

env = build_synthetic_env()
labels = env.mdp.state_labels
print("states:", labels)
print("contexts:", env.contexts.labels, env.contexts.probs)

vstar, pi_star = optimal_value(env)
print(f"V* = {vstar:.6f}")
print("optimal first-layer action:", pi_star[0, 0].argmax())

# %%
# Posteriors at the terminal states
# ---------------------------------
# At s3g the posterior is far from uniform and points at action 0 when the
# feedback decodes to r = 1.  At s3b the reward is constant, so the feedback
# carries no information about the action.
np.set_printoptions(precision=4, suppress=True)
for s in env.mdp.terminal_states:
    table = true_posterior_table(env, s)
    for x, xl in enumerate(env.contexts.labels):
        for y, yl in enumerate(env.feedback.symbols):
            print(f"{labels[s]:>4} x={xl:<5} y={yl}  h* = {table[x, y]}")

# %%
# Decoding
# --------
consts = env_constants(env)
print(f"kappa={consts.kappa:.4f}  xi={consts.xi:.4f}  L={consts.L:.3f}")
h = true_posterior_table(env, 3)
for a in range(env.n_actions):
    print(f"J(h*(True, y=1, s3g), a={a}) = {decode(h[0, 1], a, consts):.3f}")

# coding: utf-8

# # The three environments
#
# Scavenger 1 has m food particles; Scavenger 2 adds m poison particles; the
# convoy task has a defender protecting three convoy members from attackers
# that spawn on the arena boundary.

import numpy as np

from exchangeable.envs import Env, make_config
from exchangeable.ppo import GreedyPursuitPolicy, evaluate_policy

env = Env(make_config("scavenger2", num_food=2))
obs = env.reset(seed=1)
print("food (relative):\n", obs.objects.classes["food"])
print("poison (relative):\n", obs.objects.classes["poison"])
print("flat observation length:", obs.flat.shape[0])


# ## A scripted oracle
#
# Heading straight for the nearest food is close to optimal when there is no
# poison. Its average return sets the thresholds used when judging training.

for m in (1, 3, 5):
    cfg = make_config("scavenger1", num_food=m)
    res = evaluate_policy(GreedyPursuitPolicy(), lambda: Env(cfg), 300, seed=0)
    print(f"m={m}  oracle return {res.mean_return:.3f}  mean length {res.mean_length:.1f}")


# ## A convoy episode with an idle defender
#
# With the defender standing still, attackers pick off members on the way and
# the episode usually ends with some members lost (cause "mixed" or
# "destroyed"). Training should push that toward "arrived".

env = Env(make_config("convoy"))
obs = env.reset(seed=3)
total, info = 0.0, {}
while True:
    res = env.step(np.zeros(2))
    total += res.reward
    if res.done:
        info = res.info
        break
print(f"idle defender: return {total:.2f}, cause {info['cause']}, steps {env.state.elapsed}")

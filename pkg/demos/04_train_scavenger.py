# coding: utf-8

# # Training a PPO policy on Scavenger 1
#
# A short run with the attention encoder. Forty iterations of 2048 steps take
# a little under a minute on one core and are usually enough to see the return
# climb from about -4 (wandering until timeout) toward the oracle.
# Set DEMO_ITERS for a longer run.

import os

from exchangeable.envs import Env, make_config
from exchangeable.ppo import Policy, PPOHyperparams, Trainer, evaluate_policy

iters = int(os.environ.get("DEMO_ITERS", 40))
cfg = make_config("scavenger1", num_food=1)
factory = lambda: Env(cfg)  # noqa: E731

policy = Policy.for_env(factory(), "attention", seed=0)
trainer = Trainer(policy, factory, PPOHyperparams(), seed=0, workers=8)


def show(tr, rec):
    if rec.iteration % 10 == 0 or rec.iteration == 1:
        print(f"iter {rec.iteration:4d}  return {rec.mean_return:7.3f}  length {rec.mean_length:6.1f}  kl {rec.approx_kl:.4f}")


trainer.train(iters, callback=show)
res = evaluate_policy(policy, factory, 100, seed=123)
print(f"evaluation: mean return {res.mean_return:.3f}, causes {dict(res.causes)}")

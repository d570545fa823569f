"""Quick rollout sanity check across tasks; prints success rates."""
import sys
import time

import numpy as np

from cap.episodes import Task
from cap.sim import EgoGymEnv, make
from cap.sim.oracle import OraclePolicy


def run(task_name, n=30, **kwargs):
    wins = 0
    steps_used = []
    policy = OraclePolicy()
    for seed in range(n):
        env = make(task_name, seed=seed, images=False, **kwargs)
        env.reset()
        done = False
        while not done:
            _, reward, done, info = env.step(policy.act(env))
        wins += info["success"]
        steps_used.append(info["step"])
    print(f"{task_name} {kwargs}: {wins}/{n} success, mean steps {np.mean(steps_used):.1f}, max {max(steps_used)}")
    return wins


t0 = time.time()
w1 = run("EgoGym-Pick-v0", 30)
w2 = run("EgoGym-Pick-v0", 20, distractor_count=3)
w3 = run("EgoGym-Open-v0", 30)
w4 = run("EgoGym-Close-v0", 30)
w5 = run("EgoGym-Open-v0", 20, twin=True)
print(f"elapsed {time.time()-t0:.1f}s")
if w1 < 29 or w3 < 27 or w5 < 19:
    sys.exit("success rates too low")

"""Open a cabinet, pick the shelved object out of it, close the door,
all on one persistent scene; then check a partially open door blocks."""
import sys

import numpy as np

from cap.episodes import Task
from cap.sim import EgoGymEnv
from cap.sim.core import Action
from cap.sim.oracle import OraclePolicy
from cap.sim.scene import generate_compose_scene


def run_stage(env, task, target_obj=None, max_steps=80):
    env.set_stage(task, target_obj=target_obj)
    policy = OraclePolicy()
    for _ in range(max_steps):
        if env.state.done:
            break
        _, _, done, info = env.step(policy.act(env))
        if done:
            break
    return env.state.success


ok = 0
for seed in range(20):
    scene = generate_compose_scene(seed)
    env = EgoGymEnv(Task.OPEN, scene=scene, images=False)
    s1 = run_stage(env, Task.OPEN)
    env.home()
    s2 = run_stage(env, Task.PICK, target_obj=0)
    env.home()
    s3 = run_stage(env, Task.CLOSE)
    if s1 and s2 and s3:
        ok += 1
    else:
        print(f"seed {seed}: open={s1} pick={s2} close={s3} q={env.state.qs}")
print(f"compose open/pick/close: {ok}/20")

# partial open then pick: door in the way, grasp must fail
blocked_fail = 0
for seed in range(10):
    scene = generate_compose_scene(seed)
    env = EgoGymEnv(Task.OPEN, scene=scene, images=False)
    env.set_stage(Task.OPEN)
    policy = OraclePolicy()
    while env.state.qs[0] < 0.4 and not env.state.done:
        env.step(policy.act(env))
    env.home()
    s = run_stage(env, Task.PICK, target_obj=0)
    blocked_fail += not s
print(f"partial-open blocked pick failures: {blocked_fail}/10")
if ok < 17 or blocked_fail < 9:
    sys.exit("compose behavior off")

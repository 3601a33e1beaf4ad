"""
Schedules side by side on a toy budget
======================================

A few thousand pendulum steps with random-policy prior data: enough to see
the accounting differ between schedules, far too little to learn the task.
The real experiments read datasets produced by ``sopelab bootstrap`` and
``sopelab gen-data``.
"""
from sopelab import envlab
from sopelab.accounting import closed_form_total
from sopelab.config import ScheduleConfig
from sopelab.driver import run

prior = envlab.generate_dataset("pendulum", envlab.uniform_policy(1), 2000, seed=0, tier="simple")
anchors = envlab.ScoreAnchors("pendulum-swingup", -1870.0, -874.0)

common = dict(hidden=(32, 32), batch_size=32, total_steps=2000, online_steps=500, eval_every=1000,
              eval_episodes=2, eval_interval=50, patience=3, cap=2000, n_fix=500, utd=5, dtype="float32")

for schedule in ("sacfd", "sope", "speq_fixed", "rlpd_lite"):
    cfg = ScheduleConfig(schedule=schedule, **common)
    result = run(cfg, dataset=prior, anchors=anchors)
    fwd, bwd = closed_form_total(result.update_log, cfg.agent_config(3, 1), cfg.batch_size)
    print(f"{schedule:10s} score {result.final_score:7.1f}  updates {result.grad_updates:6d}  "
          f"GFLOPs {result.ledger.total / 1e9:7.2f}  closed form agrees: {fwd + bwd == result.ledger.total}")
    if result.phases:
        print("           phase lengths:", [p.updates for p in result.phases])

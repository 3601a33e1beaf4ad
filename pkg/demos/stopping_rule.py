"""
The patience rule on scripted estimate sequences
================================================

Feed hand-written value traces through the controller and see where each
patience setting ends the phase.
"""
from sopelab.opestop import OpeController, observe, stopping_index

traces = {
    "rising": [1, 2, 3, 4, 5, 6, 7, 8],
    "early peak": [5, 4, 4, 4, 4, 4],
    "noisy climb": [1, 3, 2, 4, 3, 3, 5, 4, 4, 4, 4],
}
for name, values in traces.items():
    stops = {p: stopping_index(values, p) for p in (1, 3, 5)}
    print(f"{name:12s}", stops)

# step by step, with the reason attached to each observation
ctl = OpeController(patience=3, eval_interval=500)
for i, v in enumerate([5, 4, 4, 4], start=1):
    ctl, decision = observe(ctl, v, 500 * i)
    print(500 * i, v, decision.reason, "best", ctl.best)

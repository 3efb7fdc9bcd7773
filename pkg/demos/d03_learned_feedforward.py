"""
Learning the feedforward from closed-loop data
==============================================

Eleven scaled copies of the move are run with F(q) active.  A Matern-3/2 GP
on windows of 20 past and 40 future outputs is trained on every 30th
sample and then replaces F(q) on a seen and an unseen reference.  The last
column is a reference far outside the training band: no improvement is
expected there.

Takes about a minute.
"""

from gpff.config import load_config
from gpff.pipeline import run_procedure

cfg = load_config()
plan = cfg.build_plan()
evals = cfg.eval_references(plan.base_reference)   # r1 = 1.0, r2 = 1.05, r3 = 2.0

res = run_procedure(plan, evals, cfg.build_plant(), cfg.build_controller(), cfg.build_baseline(), workers=4)
print(res.report.render_table())
print("hyperparameters:", res.report.metadata["hyperparameters"]["sigma_f"], res.gp.sigma_n)

res.report.write("learned_ff")

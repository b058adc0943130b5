# # When the frozen variance goes stale
#
# The drift task shrinks the features of three of its four layers right when
# compression starts, so their gradients (and true second moments) fall by up
# to 10^4. The basic 1-bit variant keeps using the stale variance and the
# stale coefficient. 1-bit LAMB tracks a fresh variance and lets the ratio
# frozen/fresh raise each layer's rate, within its clipping bounds.

import numpy as np

from onebit_lamb import RunConfig, run_training

base = RunConfig().replace(task="drift_quadratic", noise=0.2, lr=0.01, total_steps=2000, warmup_steps=300)
full = run_training(base.replace(optimizer="onebit_lamb"))
basic = run_training(base.replace(optimizer="lamb_basic_1bit"))
print("1-bit LAMB:       ", round(full.final_loss, 4))
print("basic 1-bit LAMB: ", round(basic.final_loss, 4))

# The ratio climbs at most 10% per step and never leaves [0.5, 4].

for name in ("q0", "q1", "q2", "q3"):
    r = np.array([rec.r[name] for rec in full.records])
    print(name, "r at steps 300/400/1000/1999:", np.round(r[[300, 400, 1000, 1999]], 3))

"""
Staircase versus probit fit
===========================

A weighted up-down staircase homes in on the step size that a subject's
imitations tell apart half the time. For simulated subjects the same
quantity has a closed form and can also be fitted from a full
constant-stimuli block, so the three estimates can be compared.
"""

# %%
import numpy as np

from jpd.experiment import adaptive_step_search, analytic_threshold
from jpd.psychometrics import fit_jpd, tabulate
from jpd.simulator import SubjectProfile, run_block
from jpd.synthesis import build_parametric_continuum
from jpd.units import FormantPoint

a, b = FormantPoint(270, 2290), FormantPoint(390, 1990)
u = (b.mel - a.mel) / np.linalg.norm(b.mel - a.mel)
ref = FormantPoint.from_mel(*(a.mel - 60 * u))
prototypes = (FormantPoint.from_mel(*(a.mel - 120 * u)), FormantPoint(600, 1500))
cont = build_parametric_continuum(ref, FormantPoint.from_mel(*(ref.mel + 300 * u)), 13,
                                  render=False)

# %%
# A larger response gain makes imitations easier to tell apart; warping
# toward a prototype makes it harder.
for label, kw in [("identity", {}), ("gain 2", dict(response_gain=2.0)),
                  ("warp 0.5", dict(warp_strength=0.5))]:
    p = SubjectProfile(label, 99.0, prototypes, seed=4, **kw)
    stair = adaptive_step_search(p, ref, u, n_tracks=4)
    fitted = fit_jpd(tabulate(run_block(p, cont, 60), cont), 1).x50
    exact = analytic_threshold(p, ref, u)
    print(f"{label:9s} staircase {stair.distance:6.1f}  probit {fitted:6.1f}  "
          f"closed form {exact:6.1f} mels ({stair.n_trials} staircase trials)")

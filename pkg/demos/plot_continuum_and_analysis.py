"""
Building and re-measuring a vowel continuum
===========================================

Nine vowels are synthesized at equal mel steps between /i/ and /ɪ/, and each
is measured back at its tenth glottal period. The re-measured points should
sit on top of the targets.
"""

# %%
import matplotlib.pyplot as plt
import numpy as np

from jpd.analysis import measure_token
from jpd.synthesis import build_parametric_continuum
from jpd.units import FormantPoint, mel_distance

cont = build_parametric_continuum(FormantPoint(270, 2290), FormantPoint(390, 1990), 9)
print("mel gaps:", np.round(cont.mel_gaps(), 3))

# %%
# Re-measure each rendered token.
measured = [measure_token(x, cont.sample_rate).point for x in cont.audio]
for s, m in zip(cont.stimuli, measured):
    print(f"stim {s.id}: target {s.target.f1:6.1f}/{s.target.f2:6.1f} Hz, "
          f"measured {m.f1:6.1f}/{m.f2:6.1f} Hz, off by {mel_distance(s.target, m):.3f} mel")

# %%
# Vowel-chart orientation: F2 falls to the right, F1 grows downward.
fig, ax = plt.subplots()
ax.plot([s.target.f2 for s in cont.stimuli], [s.target.f1 for s in cont.stimuli], "g+", ms=12,
        label="target")
ax.plot([m.f2 for m in measured], [m.f1 for m in measured], "ko", mfc="none", label="measured")
ax.invert_xaxis()
ax.invert_yaxis()
ax.set_xlabel("F2 (Hz)")
ax.set_ylabel("F1 (Hz)")
ax.legend()
plt.show()

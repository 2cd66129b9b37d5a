"""
Limens from sixteen simulated mimics
====================================

The bundled exp1 config runs every stage: synthesis, simulated mimicry,
stimulus re-measurement, pair tabulation, probit fits and the report.
Limens should peak near the category prototypes and dip at the boundary.
"""

# %%
import json
import tempfile

import matplotlib.pyplot as plt

from jpd.experiment import bundled_config, load_config, run_pipeline
from jpd.psychometrics import read_estimates

run_dir = tempfile.mkdtemp(prefix="jpd_exp1_")
cfg = load_config(bundled_config("exp1_reference"))
report = run_pipeline(cfg, run_dir)
print(json.dumps(report.summary, indent=2))

# %%
# Per-reference X50 with the prototype and mean boundary positions.
rows = [r for r in read_estimates(report.path("jpd.csv")) if r["x50_mels"]]
refs = [int(r["reference_stim"]) for r in rows if r["reference_stim"].isdigit()]
x50 = [float(r["x50_mels"]) for r in rows if r["reference_stim"].isdigit()]
fig, ax = plt.subplots()
ax.plot(refs, x50, "k-o")
for p in report.summary["prototype_positions"]:
    ax.axvline(p, ls="--", color="tab:blue")
ax.axvline(report.summary["mean_boundary"], ls=":", color="tab:red")
ax.set_xlabel("reference stimulus")
ax.set_ylabel("X50 (mels)")
plt.show()

# %%
# The report stage also wrote SVG figures and a manifest of file hashes.
print(open(report.path("summary.txt")).read())

"""Square-root versus even spreading of the residual across layers.

With several critical layers, each layer takes a share of what is left of
the residual. Square-root spreading hands earlier layers a larger share, so
its total update is bigger. This compares the two modes, plus the variant
that skips the attention part of the optimization, over a few seeds.
"""

import numpy as np

from desk import desk_setup
from pmetlab.cli import reliability, run_ablation
from pmetlab.editor import EditConfig

records, texts, model = desk_setup()
seeds = [0, 1, 2]
base = EditConfig(critical_layers=(1, 2))
rows = run_ablation(model, records, texts, seeds, n_requests=20, base_cfg=base,
                    modes=["pmet", "even_spread", "no_delta_a"],
                    log_cell=lambda r: print(f"  {r['mode']:>12} seed {r['seed']}: {r['status']}"))

print("\n        mode  |delta|  efficacy  generalization  specificity  reliability")
for mode in ("pmet", "even_spread", "no_delta_a"):
    ok = [r for r in rows if r["mode"] == mode and r["status"] == "ok"]
    mean = {k: float(np.mean([r[k] for r in ok]))
            for k in ("total_delta_norm", "efficacy", "generalization", "specificity")}
    print(f"{mode:>12}  {mean['total_delta_norm']:7.2f}  {mean['efficacy']:8.1f}  {mean['generalization']:14.1f}"
          f"  {mean['specificity']:11.1f}  {reliability(mean):11.2f}")

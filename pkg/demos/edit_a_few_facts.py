"""Rewrite a handful of facts in the desk model and watch what moves.

Run with ``python demos/edit_a_few_facts.py``. Prints the greedy answer
for each edited prompt, one paraphrase and one neighbor before and after
the edit, then the aggregate metrics.
"""

import numpy as np

from desk import desk_setup
from pmetlab.corpus import edit_requests
from pmetlab.editor import EditConfig, apply_edits
from pmetlab.evaluation import EvalConfig, evaluate_all
from pmetlab.model import next_token_distribution


def answer(model, prompt):
    probs = next_token_distribution(model, model.vocab.encode(prompt))
    return model.vocab.decode([int(np.argmax(probs))])


records, texts, model = desk_setup()
requests = edit_requests(records, 5, seed=0)

cfg = EditConfig()
edited, report = apply_edits(model, requests, cfg, sample_texts=texts)
print(f"\nedited layers {list(cfg.critical_layers)}, total update norm {report.total_delta_norm:.3f}\n")

for r in requests:
    print(f"{r.src!r}: wanted {r.target_new!r} (was {r.original_object!r})")
    rows = [("prompt", r.src), ("paraphrase", r.rephrase[0]), ("neighbor", r.loc[0][0])]
    for kind, prompt in rows:
        print(f"  {kind:<10} {answer(model, prompt):>10} -> {answer(edited, prompt):<10} {prompt!r}")

# generation metrics are skipped to keep the demo quick
before = evaluate_all(model, requests, EvalConfig(generation=False))
after = evaluate_all(edited, requests, EvalConfig(generation=False))
print("\n          efficacy  generalization  specificity  score")
for name, res in (("before", before), ("after", after)):
    print(f"{name:>8}  {res.efficacy:8.1f}  {res.generalization:14.1f}  {res.specificity:11.1f}  {res.score:5.1f}")

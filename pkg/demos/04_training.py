"""A short differentiable training run on fig5a.

This is far shorter than a real run (a few epochs on 2000 rows) and only shows
the moving parts: restarts, loss terms, the best restart and the extracted
graph.  With longer runs the learner still tends to merge the two middle
latents into one on this graph; see the decisions ledger.
"""
from hierlatent.figures import builtin
from hierlatent.graph import best_perm_shd_f1
from hierlatent.learner import TrainConfig, train
from hierlatent.sem import SemSpec, sample_sem

g = builtin("fig5a")
data = sample_sem(g, SemSpec(samples=2000, seed=0))
cfg = TrainConfig(epochs=8, restarts=3, mine_warmup=4, seed=0)

res = train(data.values, cfg=cfg, log=lambda epoch, terms: print(
    epoch, {k: [round(float(x), 3) for x in v] for k, v in terms.items() if k in ("total", "recon", "kl")}))
print(res.summary())
m = best_perm_shd_f1(g, res.graph)
print("extracted layers:", res.graph.layer_sizes, f"SHD {m.shd}, F1 {m.f1:.2f}")

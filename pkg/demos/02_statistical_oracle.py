"""Replace the exact oracle with a statistical one fitted from data.

r(S, T) is read off as the rank of the Jacobian of a neural regressor for
E[x_T | x_S].  Expect a few minutes on one CPU.
"""
from hierlatent.dsep import ExactOracle
from hierlatent.figures import builtin
from hierlatent.graph import best_perm_shd_f1
from hierlatent.rank import StatisticalOracle, statistical_r
from hierlatent.sem import SemSpec, sample_sem

g = builtin("fig5a")
data = sample_sem(g, SemSpec(samples=10_000, seed=0))
print("sampled", data.values.shape, "with leaky ReLU mechanisms")

for S, T in [([0, 1], [2, 3]), ([0, 2], [1, 3]), ([0], [1])]:
    d = statistical_r(data, S, T)
    print(f"r({S},{T}): statistical {d.rank}, exact {ExactOracle(g).query(S, T)},"
          f" singular values {d.spectrum.round(3)}, held-out R2 {d.heldout_r2:.3f}")

from hierlatent.recover import recover_full
est, trace = recover_full(StatisticalOracle(data), g.num_measured)
m = best_perm_shd_f1(g, est)
print(f"recovered from data with {len(trace.queries)} queries: SHD {m.shd}, F1 {m.f1:.2f}")

"""The structural penalty and relaxed masks used by the learner.

The penalty is zero exactly when every latent with a child keeps at least two
pure children, so it can steer continuous masks toward valid hierarchies.
"""
import numpy as np

from hierlatent.learner import sample_mask, structure_penalty

# rows are latents, columns their candidate children
good = np.array([[1, 1, 0, 0],
                 [0, 0, 1, 1]])
shared = np.array([[1, 1, 1, 0],
                   [0, 0, 1, 1]])   # second latent keeps only one pure child
lonely = np.array([[1, 0, 0, 0],
                   [0, 1, 1, 1]])   # first latent has a single child
for name, m in [("two clean clusters", good), ("shared child", shared),
                ("single child", lonely)]:
    print(f"{name:20s} penalty {float(structure_penalty([m])):.1f}")

# relaxed Bernoulli masks: low temperature pushes samples toward {0, 1}
rng = np.random.default_rng(0)
gamma = np.array([[-2.0, 0.0, 2.0]])
for t in [1.0, 0.5, 0.1]:
    s = np.stack([sample_mask(gamma, t, rng) for _ in range(2000)])
    print(f"temperature {t}: mean {s.mean(0).round(2)}, "
          f"share near 0 or 1 {np.mean((s < 0.05) | (s > 0.95)):.2f}")

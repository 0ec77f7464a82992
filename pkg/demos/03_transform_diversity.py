"""Does retraining each student on its own transformed data make attacks transfer less?

Builds pools with no adversarial training, once with per-student transforms
and once with everyone retrained on the same data, and compares how often
FGSM examples crafted on one student also fool the others.
"""

# %% Setup
from morphence import evaluation as ev
from morphence.attacks import AttackSpec
from morphence.poolgen import PoolConfig
from morphence.workflow import train_base

setup = train_base()
spec = AttackSpec("fgsm", 0.1)

# %% A transform on/off sweep per seed
for seed in range(3):
    result = ev.sweep("transform", setup.base, setup.train, setup.test,
                      PoolConfig(n=4, p=0, seed=seed), attacks=[], transfer_attack=spec)
    on, off = (r["transferability"] for r in result.rows)
    print(f"seed {seed}: transforms {on:.3f}  shared data {off:.3f}")

# %% The full pairwise matrix for one pool
from morphence.poolgen import generate_pool

pool = generate_pool(setup.base, PoolConfig(n=4, p=0, seed=0), setup.train, setup.test)
matrix, avg = ev.pool_transferability(pool, setup.test, spec)
print("\nrow i, column j: share of examples fooling student i that also fool student j")
print(matrix.rates.round(3))
print("examples fooling each student:", matrix.n_adv.tolist())

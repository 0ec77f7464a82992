"""Compare the undefended model with a pool deployment under attack, then measure FRQ.

FRQ asks how many adversarial examples that fooled the first pool stop working
once later pools take over.  Takes a couple of minutes, mostly pool generation.
"""

# %% Setup
from morphence import evaluation as ev
from morphence.attacks import AttackSpec
from morphence.poolgen import PoolConfig
from morphence.scheduler import PoolManager
from morphence.workflow import generate_pools, train_base

setup = train_base()
pools = generate_pools(setup, PoolConfig(n=4, p=3, seed=0), count=5)

# %% Robustness: white-box attacks are crafted on the base model and sent to both targets
attacks = [AttackSpec("fgsm", 0.3), AttackSpec("pgd", 0.3, max_iter=40), AttackSpec("cw", 0.3)]
fixed = ev.robustness_eval(setup.base, attacks, setup.test, setup.base)
deployed = ev.robustness_eval(PoolManager(pools, fixed_qmax=1000), attacks, setup.test, setup.base)
print(f"{'attack':<10}{'undefended':>12}{'pools':>10}")
for a, b in zip(fixed, deployed):
    print(f"{a['attack']:<10}{a['accuracy']:>12.3f}{b['accuracy']:>10.3f}")

# %% SPSA against pool 1 only, replayed against pools 2-5
x_adv, queries = ev.craft(AttackSpec("spsa", 0.3), setup.test, setup.base, pools[0])
report = ev.frq(pools[0], pools[1:], x_adv, setup.test.y)
print(f"\nSPSA spent {queries} queries; pool 1 accuracy on its own examples: {report.first_accuracy:.3f}")
for row in report.rows():
    print(f"pool {row['pool']}: accuracy {row['accuracy']:.3f}, recovered {row['a']}/{row['b']} (FRQ {row['frq']:.2f})")
print(f"FRQ averaged over pools {report.mean_over_pools:.3f}, pooled over examples {report.pooled:.3f}")

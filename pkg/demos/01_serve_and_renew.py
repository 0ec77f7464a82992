"""Train a base model, build a few student pools, serve them and watch the pools rotate.

Run with ``python demos/01_serve_and_renew.py``; it takes about a minute.
"""

# %% Base model on the 8x8 digits
import numpy as np

from morphence import server
from morphence.poolgen import PoolConfig
from morphence.workflow import generate_pools, train_base

setup = train_base()
print(f"base model test accuracy: {setup.base_accuracy:.3f}")

# %% Three pools of four students, the last three adversarially trained
pools = generate_pools(setup, PoolConfig(n=4, p=3, seed=0), count=3)
for pool in pools:
    accs = [f"{i['clean_acc']:.3f}" for i in pool.info]
    print(f"pool {pool.pool_id}: {pool.gen_duration:.1f}s, student accuracies {accs}")
    print("   transforms:", [t.to_dict()["kind"] for t in pool.transform_specs])

# %% Serve them with a small fixed budget so renewals are visible
cfg = server.ServerConfig(listen="127.0.0.1:0", admin="127.0.0.1:0", fixed_qmax=150, expose_confidence=True)
with server.build_server(cfg, pools) as srv:
    with server.RemoteTarget(srv.address, "confidence") as remote:
        labels, confidence = remote.query(setup.test.x[:400])
    status = server.admin_status(srv.admin_address)

print(f"served accuracy on 400 queries: {np.mean(labels == setup.test.y[:400]):.3f}")
print(f"mean reported confidence: {confidence.mean():.3f}")
for event in status["renewal_log"]:
    print(f"pool {event['pool_id']} retired after {event['queries_served']} queries")
print(f"active pool has answered {status['query_count']} queries, {status['buffer_depth']} pools on standby")

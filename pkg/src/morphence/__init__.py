"""Moving-target defense against adversarial examples: student pools, scheduling and evaluation."""

from morphence.nn import Model, init_model
from morphence.poolgen import PoolConfig, StudentPool, generate_pool
from morphence.scheduler import PoolManager

__all__ = ["Model", "PoolConfig", "PoolManager", "StudentPool", "generate_pool", "init_model"]

from .agents import ENV_VARIABLES, DiffEnvAgent, EnvAgent
from .core import CartPole, EnvCore, GridWorld, InvalidActionError, SleepEnv, make_env
from .loader import ArrayDataset, DataLoaderAgent

__all__ = [
    "ENV_VARIABLES",
    "ArrayDataset",
    "CartPole",
    "DataLoaderAgent",
    "DiffEnvAgent",
    "EnvAgent",
    "EnvCore",
    "GridWorld",
    "InvalidActionError",
    "SleepEnv",
    "make_env",
]

"""Sequential decision making as agents communicating through a shared workspace."""

from . import tensor
from .agent import (
    Agent,
    Agents,
    CrossEntropyAgent,
    FillAgent,
    LinearAgent,
    ReentrancyError,
    TAgent,
    TemporalAgent,
    execute,
    replay,
    sequential,
    temporal,
)
from .nn import MLP, Linear, Module
from .optim import SGD, Adam, make_optimizer
from .parallel import RemoteAgent, SharedWorkspace, create_remote
from .replay import ReplayBuffer
from .tensor import Tensor, backward, grad_mode, no_grad
from .workspace import TrajectoryDataset, Workspace, load_dataset, save_dataset

__version__ = "0.1.0"

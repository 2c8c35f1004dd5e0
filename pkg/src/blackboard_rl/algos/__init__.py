from .common import ConfigError, MetricLog, Rollout, TrainConfig, completed_returns, epsilon_at, evaluate
from .demos import demo_model_based, demo_multi_agent
from .policies import (
    CartPoleExpert,
    CategoricalPolicy,
    CriticAgent,
    GridExpert,
    LinearPolicy,
    QAgent,
    RandomPolicy,
    RecurrentAgent,
    make_policy,
    make_q_agent,
)
from .returns import double_dqn_target, one_step_advantage, return_to_go, transition_views
from .trainers import (
    TRAINERS,
    a2c_losses,
    action_agreement,
    bc_loss,
    dqn_loss,
    reinforce_loss,
    run_policy,
    train,
    train_a2c,
    train_bc,
    train_double_dqn,
    train_reinforce,
)

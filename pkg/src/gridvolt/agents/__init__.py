"""Actor-critic agents (TD3, PI-TD3) and baseline controllers."""
from .baselines import ActorPolicy, CafapPolicy, FixedPlanPolicy, NoChargingPolicy, act_cafap, act_none
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn import MLP, Adam, ShapeError, soft_update
from .td3 import (EpochAbort, NonFiniteLossError, PhysicsSpec, TD3Agent, TrainerConfig,
                  TrainingError, act, observation_scale, pi_actor_update, rollout_objective,
                  smoothing_noise, td3_actor_update, td3_critic_update, td3_target, update_step)
from .trainer import (CurvePoint, TrainResult, collect_episode, evaluate_policy, make_agent,
                      read_curve, train, write_curve)

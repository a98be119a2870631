import numpy as np
import pytest

from ministar.domain.net_config import profile
from ministar.domain.policy_net import PolicyNet
from ministar.drivers.microrts import ActionType, ArgsAction, EnvConfig, MicroRTS, UnitKind


@pytest.fixture
def net_cfg():
    return profile("tiny")


@pytest.fixture
def env_cfg():
    return EnvConfig(max_game_frames=60)


@pytest.fixture
def net(net_cfg):
    return PolicyNet(net_cfg, seed=0)


@pytest.fixture
def env(env_cfg):
    e = MicroRTS(env_cfg)
    e.reset(3)
    return e


def move_action(env, player=0, delay=1):
    """A legal MOVE of the player's worker to the first free cell."""
    worker = next(u for u in env.units(player) if u.kind == UnitKind.WORKER)
    ego = int(np.flatnonzero(env.action_masks(player).location_mask[ActionType.MOVE])[0])
    return ArgsAction(ActionType.MOVE, delay=delay, selected_units=(worker.id,),
                      target_location=env.ego_to_board(player, ego))


def attack_action(env, player=0):
    fighter = next(u for u in env.units(player) if u.kind == UnitKind.FIGHTER)
    enemy = next(u for u in env.units(1 - player) if u.kind == UnitKind.BASE)
    return ArgsAction(ActionType.ATTACK, selected_units=(fighter.id,), target_unit=enemy.id)

"""Binary framing for trajectories.

Each record is

    b"MSTR" | u16 version | u32 header length | u32 payload length | header | payload

The header is UTF-8 JSON holding every scalar field; the payload is an
uncompressed `.npz` archive holding every array, loaded with pickling
disabled. Records can be concatenated on one stream.
"""

from __future__ import annotations

import io
import json
import struct
import zipfile
from typing import BinaryIO, Iterator, Optional

import numpy as np

from ministar.domain.policy_net import HeadRecord
from ministar.domain.trajectory import Trajectory, TrajectoryStep
from ministar.drivers.microrts import ActionMasks, ArgsAction, MsState
from ministar.errors import FormatError

MAGIC = b"MSTR"
WIRE_VERSION = 1
_PREFIX = struct.Struct("<4sHII")

_OBS_ARRAYS = ("entity_state", "entity_valid", "scalar_state", "spatial_state")
_MASK_ARRAYS = ("type_mask", "queue_mask", "unit_selection_mask", "target_unit_mask", "location_mask")


class _Writer:
    def __init__(self) -> None:
        self.arrays: dict[str, np.ndarray] = {}

    def obs(self, key: str, obs: Optional[MsState]) -> Optional[dict]:
        if obs is None:
            return None
        for name in _OBS_ARRAYS:
            self.arrays[f"{key}.{name}"] = getattr(obs, name)
        return {"player": obs.player, "frame": obs.frame, "map_size": obs.map_size, "entity_ids": list(obs.entity_ids)}

    def masks(self, key: str, masks: Optional[ActionMasks]) -> bool:
        if masks is None:
            return False
        for name in _MASK_ARRAYS:
            self.arrays[f"{key}.{name}"] = getattr(masks, name)
        return True

    def record(self, key: str, rec: HeadRecord) -> dict:
        self.arrays[f"{key}.logits"] = rec.logits
        self.arrays[f"{key}.mask"] = rec.mask
        return {"index": rec.index, "used": rec.used}


def _action_json(a: ArgsAction) -> dict:
    return {
        "t": a.action_type, "d": a.delay, "q": a.queue, "u": list(a.selected_units),
        "tu": a.target_unit, "tl": None if a.target_location is None else list(a.target_location),
    }


def _action_from(d: dict) -> ArgsAction:
    loc = d["tl"]
    return ArgsAction(d["t"], d["d"], d["q"], tuple(d["u"]), d["tu"], None if loc is None else tuple(loc))


def encode_trajectory(traj: Trajectory) -> bytes:
    w = _Writer()
    for i, (h, c) in enumerate(traj.initial_hidden):
        w.arrays[f"hidden.{i}.h"] = h
        w.arrays[f"hidden.{i}.c"] = c
    steps = []
    for t, s in enumerate(traj.steps):
        behavior = {}
        for head, value in s.behavior.items():
            if isinstance(value, list):
                behavior[head] = [w.record(f"s{t}.b.{head}.{k}", r) for k, r in enumerate(value)]
            else:
                behavior[head] = w.record(f"s{t}.b.{head}", value)
        steps.append({
            "obs": w.obs(f"s{t}.obs", s.observation),
            "opp": w.obs(f"s{t}.opp", s.opponent_observation),
            "masks": w.masks(f"s{t}.masks", s.masks),
            "action": _action_json(s.action),
            "behavior": behavior,
            "reward": s.reward,
            "is_final": s.is_final,
        })
    header = {
        "player_id": traj.player_id,
        "policy_version": traj.policy_version,
        "layers": len(traj.initial_hidden),
        "steps": steps,
        "bootstrap": w.obs("boot.obs", traj.bootstrap_observation),
        "bootstrap_opp": w.obs("boot.opp", traj.bootstrap_opponent_observation),
        "bootstrap_masks": w.masks("boot.masks", traj.bootstrap_masks),
    }
    head_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    np.savez(buf, **w.arrays)
    payload = buf.getvalue()
    return _PREFIX.pack(MAGIC, WIRE_VERSION, len(head_bytes), len(payload)) + head_bytes + payload


def _read_obs(arrays, key: str, meta: Optional[dict]) -> Optional[MsState]:
    if meta is None:
        return None
    return MsState(
        meta["player"], meta["frame"], meta["map_size"],
        arrays[f"{key}.entity_state"], arrays[f"{key}.entity_valid"], tuple(meta["entity_ids"]),
        arrays[f"{key}.scalar_state"], arrays[f"{key}.spatial_state"],
    )


def _read_masks(arrays, key: str, present: bool) -> Optional[ActionMasks]:
    if not present:
        return None
    return ActionMasks(*(arrays[f"{key}.{name}"] for name in _MASK_ARRAYS))


def _read_record(arrays, key: str, meta: dict) -> HeadRecord:
    return HeadRecord(arrays[f"{key}.logits"], arrays[f"{key}.mask"], meta["index"], meta["used"])


def decode_trajectory(blob: bytes) -> Trajectory:
    if len(blob) < _PREFIX.size:
        raise FormatError("truncated trajectory record")
    magic, version, head_len, payload_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise FormatError(f"unsupported wire version {version}")
    if len(blob) != _PREFIX.size + head_len + payload_len:
        raise FormatError("record length does not match its prefix")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + head_len].decode("utf-8"))
        with np.load(io.BytesIO(blob[_PREFIX.size + head_len:]), allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
        hidden = tuple((arrays[f"hidden.{i}.h"], arrays[f"hidden.{i}.c"]) for i in range(header["layers"]))
        steps = []
        for t, s in enumerate(header["steps"]):
            behavior = {}
            for head, meta in s["behavior"].items():
                if isinstance(meta, list):
                    behavior[head] = [_read_record(arrays, f"s{t}.b.{head}.{k}", m) for k, m in enumerate(meta)]
                else:
                    behavior[head] = _read_record(arrays, f"s{t}.b.{head}", meta)
            steps.append(TrajectoryStep(
                _read_obs(arrays, f"s{t}.obs", s["obs"]),
                _read_obs(arrays, f"s{t}.opp", s["opp"]),
                _read_masks(arrays, f"s{t}.masks", s["masks"]),
                _action_from(s["action"]),
                behavior,
                float(s["reward"]),
                bool(s["is_final"]),
            ))
        return Trajectory(
            header["player_id"], header["policy_version"], hidden, steps,
            _read_obs(arrays, "boot.obs", header["bootstrap"]),
            _read_obs(arrays, "boot.opp", header["bootstrap_opp"]),
            _read_masks(arrays, "boot.masks", header["bootstrap_masks"]),
        )
    except (KeyError, TypeError, ValueError, OSError, zipfile.BadZipFile) as exc:
        raise FormatError(f"malformed trajectory record: {exc}") from exc


def write_trajectories(stream: BinaryIO, trajectories) -> int:
    n = 0
    for traj in trajectories:
        stream.write(encode_trajectory(traj))
        n += 1
    return n


def read_trajectories(stream: BinaryIO) -> Iterator[Trajectory]:
    while True:
        prefix = stream.read(_PREFIX.size)
        if not prefix:
            return
        if len(prefix) < _PREFIX.size:
            raise FormatError("truncated record prefix")
        _, _, head_len, payload_len = _PREFIX.unpack(prefix)
        body = stream.read(head_len + payload_len)
        if len(body) != head_len + payload_len:
            raise FormatError("truncated record body")
        yield decode_trajectory(prefix + body)

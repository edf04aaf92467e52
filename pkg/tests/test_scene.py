import copy
import json

import numpy as np
import pytest
import torch

from probplan.exceptions import FormatError, ValidationError
from probplan.geometry import Footprint, Pose2
from probplan.nn import ParamStore, gelu, grad_check
from probplan.scene import (
    AgentObservation,
    SceneSnapshot,
    add_encoder_params,
    bundled_scenario_names,
    embed_scene,
    load_bundled_scenario,
    load_scenario,
    parse_scenario,
    save_scenario,
)

from helpers import light, random_snapshot, scenario_doc, snapshot, stationary_agent

T = 6


def _params(d=16, seed=0, dtype=torch.float64):
    store = ParamStore(seed=seed, dtype=dtype)
    add_encoder_params(store, d, T)
    return store


def _stationary(x=30.0):
    return {"id": "car", "start_pose": [x, 0.0, 0.0], "behavior": {"kind": "stationary"}}


def test_parse_minimal_scenario():
    spec = parse_scenario(scenario_doc(agents=[_stationary()]))
    assert len(spec.agents) == 1
    assert spec.agents[0].behavior == "stationary"
    assert len(spec.boundaries) == 2


def test_parse_rejects_missing_boundary():
    doc = scenario_doc()
    doc["map"] = [m for m in doc["map"] if m["kind"] != "road_boundary"]
    with pytest.raises(ValidationError):
        parse_scenario(doc)


def test_parse_rejects_non_finite_coordinate():
    doc = scenario_doc(agents=[_stationary()])
    doc["agents"][0]["start_pose"][0] = float("nan")
    with pytest.raises(FormatError, match="start_pose"):
        parse_scenario(doc)


def test_parse_names_bad_field():
    doc = scenario_doc(agents=[_stationary()])
    doc["agents"][0]["behavior"]["kind"] = "teleport"
    with pytest.raises(FormatError, match="behavior"):
        parse_scenario(doc)
    doc = scenario_doc()
    doc["weather"] = "rain"
    with pytest.raises(FormatError):
        parse_scenario(doc)


def test_invalid_json_reports_offset(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"name": "x",')
    with pytest.raises(FormatError) as err:
        load_scenario(path)
    assert err.value.offset is not None


def test_scenario_round_trip(tmp_path):
    for name in bundled_scenario_names():
        spec = load_bundled_scenario(name)
        save_scenario(spec, tmp_path / f"{name}.json")
        back = load_scenario(tmp_path / f"{name}.json")
        assert back.to_dict() == spec.to_dict()


def test_bundled_scenarios_present():
    names = bundled_scenario_names()
    assert {"straight_corridor", "lead_vehicle", "blocked_lane", "red_light", "stop_sign", "yield_overtake"} <= set(names)


def test_snapshot_dict_round_trip(rng):
    s = random_snapshot(rng)
    back = SceneSnapshot.from_dict(json.loads(json.dumps(s.to_dict())))
    assert back.to_dict() == s.to_dict()


def test_snapshot_validation():
    with pytest.raises(ValidationError):
        SceneSnapshot(map=snapshot().map[2:]).validate()
    bad = snapshot([AgentObservation("a", Pose2(5, 0), Footprint(), 0.0, np.zeros((4, 3)))])
    with pytest.raises(ValidationError):
        bad.validate(T)


def test_token_count():
    s = snapshot([stationary_agent(10), stationary_agent(20, aid="b")], [light(15.0)])
    env = embed_scene(s, _params(), T)
    assert env.env_tokens.shape == (1, 3 + 2 + 1, 16)
    assert env.groups == ("map",) * 3 + ("agent",) * 2 + ("traffic",)
    assert env.navi_embedding.shape == env.state_embedding.shape == (1, 16)
    assert torch.isfinite(env.env_tokens).all()


def test_embedding_is_local_to_the_changed_agent():
    a = snapshot([stationary_agent(10), stationary_agent(20, aid="b")])
    b = copy.deepcopy(a)
    moved = b.agents[1]
    b.agents[1] = AgentObservation(moved.id, moved.pose, moved.footprint, 7.0, moved.future, moved.kind)
    p = _params()
    ea, eb = embed_scene(a, p, T).env_tokens[0], embed_scene(b, p, T).env_tokens[0]
    changed = [i for i in range(len(ea)) if not torch.equal(ea[i], eb[i])]
    assert changed == [4]


def test_zero_weights_leave_the_bias_path():
    p = _params()
    p.zero_()
    env = embed_scene(snapshot([stationary_agent(10)], [light(15.0)]), p, T)
    assert torch.count_nonzero(env.env_tokens) == 0
    p = _params()
    with torch.no_grad():
        for k in p:
            if k.endswith(".w1"):
                p[k].zero_()
    env = embed_scene(snapshot([stationary_agent(10)], [light(15.0)]), p, T)
    for i, group in enumerate(env.groups):
        pre = f"enc.{group}"
        expect = gelu(p[f"{pre}.b1"]) @ p[f"{pre}.w2"] + p[f"{pre}.b2"]
        assert torch.allclose(env.env_tokens[0, i], expect)


def test_embedding_is_deterministic(rng):
    s = random_snapshot(rng)
    p = _params()
    assert torch.equal(embed_scene(s, p, T).env_tokens, embed_scene(s, p, T).env_tokens)


@pytest.mark.parametrize("dtype,tol", [(torch.float64, 1e-5), (torch.float32, 1e-3)])
def test_embedding_gradients(dtype, tol):
    # float32 gradients are checked against float64 finite differences
    s = snapshot([stationary_agent(10)], [light(15.0)], speed=4.0)
    store = _params(d=8, dtype=dtype)

    def f(p):
        env = embed_scene(s, p, T)
        w = torch.linspace(-1, 1, 8, dtype=env.env_tokens.dtype)
        return (env.env_tokens @ w).sum() + (env.navi_embedding * env.state_embedding).sum()

    params = {k: store[k].detach() for k in store}
    assert grad_check(f, params, max_entries=8, fd_dtype=torch.float64) < tol


def test_ablation_zeroes_a_group(rng):
    s = snapshot([stationary_agent(10)], [light(15.0)])
    env = embed_scene(s, _params(), T, ablate=("agent", "navi"))
    assert torch.count_nonzero(env.env_tokens[0, 3]) == 0
    assert torch.count_nonzero(env.navi_embedding) == 0
    assert torch.count_nonzero(env.env_tokens[0, 0]) > 0
    with pytest.raises(ValidationError):
        embed_scene(s, _params(), T, ablate=("lidar",))

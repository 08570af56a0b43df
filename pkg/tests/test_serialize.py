import json

import numpy as np
import pytest

from drayage_sddp.core import ValidationError
from drayage_sddp.instancegen import PracticalSpec, gen_practical_instance
from drayage_sddp.scenario import RandomStream
from drayage_sddp.sddp import IterationLimit, TrainOptions, train
from drayage_sddp.serialize import (
    FORMAT_VERSION, dumps, instance_from_dict, instance_hash, instance_to_dict, load_instance, load_policy,
    policy_from_dict, policy_to_dict, read_json, save_instance, save_policy, stats_table,
)


@pytest.fixture(scope="module")
def trained(tiny_instance, tiny_lattice):
    return train(tiny_instance, tiny_lattice, IterationLimit(4), RandomStream(2))


def test_instance_round_trip(tmp_path, small_instance):
    downsized = gen_practical_instance(PracticalSpec.downsized(), RandomStream(3))
    for inst in (small_instance, downsized):
        path = tmp_path / f"{inst.name}.json"
        save_instance(inst, path)
        back = load_instance(path)
        assert instance_hash(back) == instance_hash(inst)
        assert dumps(instance_to_dict(back)) == path.read_text()
        data = read_json(path)
        assert data["format_version"] == FORMAT_VERSION and data["kind"] == "instance"


def test_instance_errors(small_instance):
    data = instance_to_dict(small_instance)
    tampered = json.loads(json.dumps(data))
    tampered["entry_capacity"] = [99.0, 100.0]
    with pytest.raises(ValidationError, match="instance_hash"):
        instance_from_dict(tampered)
    missing = dict(data)
    del missing["carriers"]
    with pytest.raises(ValidationError, match="carriers"):
        instance_from_dict(missing)
    with pytest.raises(ValidationError, match="format_version"):
        instance_from_dict({**data, "format_version": 999})
    with pytest.raises(ValidationError, match="kind"):
        instance_from_dict({**data, "kind": "policy"})


def test_policy_round_trip(tmp_path, tiny_instance, trained):
    policy, _ = trained
    path = tmp_path / "policy.json"
    save_policy(policy, tiny_instance, path)
    back = load_policy(path, tiny_instance)
    assert back.first_stage_bound == policy.first_stage_bound and back.initial_cost == policy.initial_cost
    for a, b in zip(back.cuts, policy.cuts):
        assert len(a) == len(b)
        assert all(x.intercept == y.intercept and np.array_equal(x.gradient, y.gradient) for x, y in zip(a, b))
    assert dumps(policy_to_dict(back, tiny_instance)) == path.read_text()


def test_policy_rejects_other_instance(tiny_instance, small_instance, trained):
    data = policy_to_dict(trained[0], tiny_instance)
    with pytest.raises(ValidationError, match="different instance"):
        policy_from_dict(data, small_instance)
    bad = dict(data)
    del bad["initial_cost"]
    with pytest.raises(ValidationError, match="initial_cost"):
        policy_from_dict(bad)


def test_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ValidationError, match="not valid JSON"):
        read_json(path)


def test_stats_table(tiny_instance, tiny_lattice, trained):
    _, stats = trained
    header, *rows = stats_table(stats).strip().splitlines()
    assert header.split(",")[:3] == ["iteration", "lower_bound", "forward_cost"]
    assert len(rows) == stats.iterations
    assert all(r.endswith(",") for r in rows)  # wall_ms blank without timing
    assert stats_table(stats) == stats_table(stats)
    timed = stats_table(stats, timing=True).strip().splitlines()[1:]
    assert all(not r.endswith(",") for r in timed)
    _, simulated = train(tiny_instance, tiny_lattice, IterationLimit(4), RandomStream(2),
                         TrainOptions(checkpoint_iterations=(2,), checkpoint_samples=5))
    row = stats_table(simulated).strip().splitlines()[2].split(",")
    assert float(row[3]) == pytest.approx(simulated.checkpoint(2).upper_mean)

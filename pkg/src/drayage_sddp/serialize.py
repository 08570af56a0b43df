"""Versioned JSON artifacts for instances, policies and reports, plus CSV tables.

Every file carries ``format_version``, a ``kind`` tag and the units in use.
Floats are written by :mod:`json`, which emits the shortest repr that
round-trips exactly, so a load/save cycle is lossless.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

from .core import Carrier, CostParams, Instance, StageRealization, SystemState, ValidationError
from .sddp import Policy, TrainingStats
from .stagemodel import Cut

FORMAT_VERSION = 1
UNITS = {"money": "USD", "quantity": "TEU"}


def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def _realization_to_dict(xi: StageRealization) -> dict:
    return {"inflow": _arr(xi.inflow), "outflow": _arr(xi.outflow), "spot_rate": _arr(xi.spot_rate)}


def _realization_from_dict(d: dict) -> StageRealization:
    return StageRealization(d["inflow"], d["outflow"], d["spot_rate"])


def _json_safe(value):
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def _body(instance: Instance) -> dict:
    return {
        "name": instance.name,
        "horizon": instance.horizon,
        "entry_hubs": list(instance.entry_hubs),
        "exit_hubs": list(instance.exit_hubs),
        "entry_capacity": _arr(instance.entry_capacity),
        "exit_capacity": _arr(instance.exit_capacity),
        "cost": {
            "entry_holding": _arr(instance.cost.entry_holding),
            "exit_holding": _arr(instance.cost.exit_holding),
            "shortage_penalty": _arr(instance.cost.shortage_penalty),
        },
        "initial_state": {
            "entry_stock": _arr(instance.initial_state.entry_stock),
            "exit_stock": _arr(instance.initial_state.exit_stock),
            "exit_shortage": _arr(instance.initial_state.exit_shortage),
        },
        "shortage_limit": None if instance.shortage_limit is None else _arr(instance.shortage_limit),
        "spot_rate_range": list(instance.spot_rate_range),
        "flow_range": list(instance.flow_range),
        "carriers": [
            {
                "id": c.id,
                "contract_rates": [[lane, rate] for lane, rate in c.contract_rates.items()],
                "contract_capacity": list(c.contract_capacity),
                "spot_capacity": list(c.spot_capacity),
            }
            for c in instance.carriers
        ],
        "nominal": None if instance.nominal is None else [_realization_to_dict(xi) for xi in instance.nominal],
    }


def instance_hash(instance: Instance) -> str:
    """Digest of the instance data (metadata excluded)."""
    text = json.dumps(_body(instance), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def instance_to_dict(instance: Instance) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "instance",
        "units": UNITS,
        "instance_hash": instance_hash(instance),
        "seed": instance.meta.get("seed"),
        **_body(instance),
        "meta": _json_safe(instance.meta),
    }


def _check_header(data: dict, kind: str) -> None:
    if not isinstance(data, dict):
        raise ValidationError(f"{kind} file must hold a JSON object")
    if data.get("kind") != kind:
        raise ValidationError(f"expected a {kind} file, found kind={data.get('kind')!r}")
    if data.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {data.get('format_version')!r} (expected {FORMAT_VERSION})")


def instance_from_dict(data: dict) -> Instance:
    _check_header(data, "instance")
    try:
        carriers = tuple(
            Carrier(
                id=c["id"],
                contract_rates={int(lane): float(rate) for lane, rate in c["contract_rates"]},
                contract_capacity=tuple(c["contract_capacity"]),
                spot_capacity=tuple(c["spot_capacity"]),
            )
            for c in data["carriers"]
        )
        cost = data["cost"]
        s0 = data["initial_state"]
        nominal = data.get("nominal")
        instance = Instance(
            entry_hubs=tuple(data["entry_hubs"]),
            exit_hubs=tuple(data["exit_hubs"]),
            horizon=data["horizon"],
            carriers=carriers,
            cost=CostParams(cost["entry_holding"], cost["exit_holding"], cost["shortage_penalty"]),
            entry_capacity=data["entry_capacity"],
            exit_capacity=data["exit_capacity"],
            initial_state=SystemState(s0["entry_stock"], s0["exit_stock"], s0["exit_shortage"]),
            shortage_limit=data.get("shortage_limit"),
            nominal=None if nominal is None else tuple(_realization_from_dict(d) for d in nominal),
            spot_rate_range=tuple(data["spot_rate_range"]),
            flow_range=tuple(data["flow_range"]),
            name=data.get("name", "instance"),
            meta=dict(data.get("meta") or {}),
        )
    except KeyError as exc:
        raise ValidationError(f"instance file is missing field {exc.args[0]!r}") from exc
    except TypeError as exc:
        raise ValidationError(f"malformed instance file: {exc}") from exc
    recorded = data.get("instance_hash")
    if recorded is not None and recorded != instance_hash(instance):
        raise ValidationError("instance_hash does not match the instance data")
    return instance


def policy_to_dict(policy: Policy, instance: Instance) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "policy",
        "units": UNITS,
        "instance_hash": instance_hash(instance),
        "seed": policy.metadata.get("seed"),
        "lattice_hash": policy.metadata.get("lattice_hash"),
        "first_stage_bound": float(policy.first_stage_bound) if math.isfinite(policy.first_stage_bound) else None,
        "initial_cost": float(policy.initial_cost),
        "metadata": _json_safe(policy.metadata),
        "stages": [
            {
                "stage": t,
                "cuts": [{"intercept": c.intercept, "gradient": _arr(c.gradient)} for c in cuts],
            }
            for t, cuts in enumerate(policy.cuts, start=1)
        ],
    }


def policy_from_dict(data: dict, instance: Instance | None = None) -> Policy:
    _check_header(data, "policy")
    if instance is not None and data.get("instance_hash") != instance_hash(instance):
        raise ValidationError("policy was trained on a different instance (instance_hash mismatch)")
    try:
        cuts = []
        for t, stage in enumerate(data["stages"], start=1):
            if stage["stage"] != t:
                raise ValidationError(f"policy stages out of order at position {t}")
            cuts.append([Cut(t, c["intercept"], c["gradient"]) for c in stage["cuts"]])
        bound = data["first_stage_bound"]
        policy = Policy(cuts, -math.inf if bound is None else float(bound), float(data["initial_cost"]),
                        dict(data.get("metadata") or {}))
    except KeyError as exc:
        raise ValidationError(f"policy file is missing field {exc.args[0]!r}") from exc
    if instance is not None and policy.horizon != instance.horizon:
        raise ValidationError(f"policy has {policy.horizon} stages, instance {instance.horizon}")
    return policy


def dumps(data: dict) -> str:
    return json.dumps(data, indent=1, sort_keys=False, allow_nan=False) + "\n"


def write_json(path, data: dict) -> None:
    Path(path).write_text(dumps(data))


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc


def save_instance(instance: Instance, path) -> None:
    write_json(path, instance_to_dict(instance))


def load_instance(path) -> Instance:
    return instance_from_dict(read_json(path))


def save_policy(policy: Policy, instance: Instance, path) -> None:
    write_json(path, policy_to_dict(policy, instance))


def load_policy(path, instance: Instance | None = None) -> Policy:
    return policy_from_dict(read_json(path), instance)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    return repr(value) if math.isfinite(value) else ""


def stats_table(stats: TrainingStats, confidence: float = 0.95, timing: bool = False) -> str:
    """One row per iteration; ``wall_ms`` stays blank unless ``timing`` is set."""
    buf = io.StringIO()
    buf.write("iteration,lower_bound,forward_cost,upper_mean,bias_percent,ci_ratio_percent,solver_calls,wall_ms\n")
    for rec in stats.records:
        k = rec.iteration
        upper = bias = ci = None
        if stats.forward_sample(k).size >= 2:
            cp = stats.checkpoint(k, confidence)
            upper, bias, ci = cp.upper_mean, cp.bias_percent, cp.ci_ratio_percent
        wall = 1000.0 * rec.wall_time if timing else None
        buf.write(",".join(_fmt(v) for v in (k, rec.lower_bound, rec.forward_cost, upper, bias, ci, rec.solver_calls, wall)))
        buf.write("\n")
    return buf.getvalue()

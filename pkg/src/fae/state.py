"""Glue between live modules/optimizers and CheckpointBundle."""
from __future__ import annotations

import base64
import dataclasses
import json
import typing

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .formats import CheckpointBundle


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str, typ):
    """Parse ``text`` into ``typ`` (bool/int/float/str, optionally ``X | None``)."""
    origin = typing.get_origin(typ)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if text.strip().lower() in ("", "none"):
            return None
        typ = args[0]
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from exc


def config_to_strings(cfg, **extra) -> dict:
    out = {f.name: format_value(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    out.update({k: format_value(v) for k, v in extra.items()})
    return out


def config_from_strings(cls, values: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {f.name: parse_value(values[f.name], hints[f.name])
              for f in dataclasses.fields(cls) if f.init and f.name in values}
    return cls(**kwargs)


def module_arrays(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_model_params(module: torch.nn.Module, params: dict) -> None:
    own = module.state_dict()
    missing = set(own) - set(params)
    unexpected = set(params) - set(own)
    if missing or unexpected:
        raise ShapeError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    dtype = None
    for name, arr in params.items():
        if own[name].shape != arr.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {tuple(own[name].shape)}")
        if arr.dtype.kind == "f":
            dtype = torch.from_numpy(np.zeros(0, arr.dtype)).dtype
    if dtype is not None:
        module.to(dtype)
    module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})


def optimizer_arrays(opt: torch.optim.Optimizer, module: torch.nn.Module) -> dict:
    out = {}
    for name, p in module.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        for key, val in st.items():
            arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val, dtype=np.float64)
            out[f"{name}.{key}"] = np.array(arr, copy=True)
    return out


def load_optimizer_state(opt: torch.optim.Optimizer, module: torch.nn.Module, arrays: dict) -> None:
    for name, p in module.named_parameters():
        keys = [k for k in arrays if k.startswith(name + ".") and k[len(name) + 1:] in ("exp_avg", "exp_avg_sq", "step")]
        if keys:
            opt.state[p] = {k[len(name) + 1:]: torch.from_numpy(np.array(arrays[k])) for k in keys}


def rng_blob(torch_gen: torch.Generator | None = None, np_rng: np.random.Generator | None = None) -> bytes:
    state = {}
    if torch_gen is not None:
        state["torch"] = base64.b64encode(torch_gen.get_state().numpy().tobytes()).decode()
    if np_rng is not None:
        state["numpy"] = np_rng.bit_generator.state
    return json.dumps(state, sort_keys=True).encode()


def bundle_from_model(kind: str, module: torch.nn.Module, config: dict, optimizer=None, step: int = 0,
                      extra: dict | None = None) -> CheckpointBundle:
    return CheckpointBundle(
        kind=kind,
        config=dict(config),
        params=module_arrays(module),
        optim=optimizer_arrays(optimizer, module) if optimizer is not None else {},
        extra=dict(extra or {}),
        step=step,
    )

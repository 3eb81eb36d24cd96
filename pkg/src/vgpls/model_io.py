"""Versioned text serialization of trained model states.

Flat key=value lines; floats use repr() so values round-trip bit-exactly,
arrays are comma-joined with an explicit shape. The first line is always
``format_version=1``.
"""

from dataclasses import asdict, fields

import numpy as np

from .bound import InducingSet
from .kernels import KernelFamily, KernelSpec
from .multioutput import LmcParams
from .trainer import ModelState, TrainConfig
from .variational import VariationalPosterior

FORMAT_VERSION = 1


def _fmt_array(arr) -> str:
    a = np.asarray(arr)
    flat = ",".join(repr(float(x)) for x in a.ravel())
    shape = "x".join(str(s) for s in a.shape)
    return f"{shape}:{flat}"


def _parse_array(text: str, dtype=float) -> np.ndarray:
    shape_s, flat = text.split(":", 1)
    shape = tuple(int(s) for s in shape_s.split("x") if s)
    vals = np.array([dtype(x) for x in flat.split(",")] if flat else [], dtype=dtype)
    return vals.reshape(shape)


def _parse_literal(raw: str):
    """Inverse of repr() for the primitive types a TrainConfig holds."""
    if raw == "True":
        return True
    if raw == "False":
        return False
    if raw.startswith(("'", '"')) and raw.endswith(raw[0]):
        return raw[1:-1]
    try:
        return int(raw)
    except ValueError:
        return float(raw)


def _fmt_kernel(spec: KernelSpec) -> str:
    parts = [spec.family.value, repr(float(spec.variance))]
    parts.append(";".join(repr(float(l)) for l in spec.lengthscales))
    parts.append(repr(float(spec.period)) if spec.period is not None else "")
    parts.append(str(spec.input_dim))
    return "|".join(parts)


def _parse_kernel(text: str) -> KernelSpec:
    fam_s, var_s, ls_s, period_s, dim_s = text.split("|")
    ls = tuple(float(x) for x in ls_s.split(";") if x)
    return KernelSpec(
        family=KernelFamily(fam_s),
        variance=float(var_s),
        lengthscales=ls,
        period=float(period_s) if period_s else None,
        input_dim=int(dim_s),
    )


def save_state(state: ModelState, path: str):
    lines = [f"format_version={FORMAT_VERSION}"]

    def put(key, val):
        lines.append(f"{key}={val}")

    put("times", _fmt_array(state.times))
    put("time_offset", repr(float(state.time_offset)))
    put("time_span", repr(float(state.time_span)))
    put("mask", _fmt_array(state.mask.astype(int)))
    put("imputed", _fmt_array(state.imputed))
    put("offsets", _fmt_array(state.offsets))
    put("scales", _fmt_array(state.scales))
    put("dim_names", "|".join(state.dim_names))
    put("active_dims", _fmt_array(np.asarray(state.active_dims, dtype=int)))
    put("dropped_dims", ",".join(str(d) for d in state.dropped_dims))
    put("mu_bar", _fmt_array(state.post.mu_bar))
    put("lambda", _fmt_array(state.post.lam))
    put("dyn_kernel", _fmt_kernel(state.dyn_kernel))
    put("map_kernel", _fmt_kernel(state.map_kernel))
    put("inducing", _fmt_array(state.inducing.Z))
    put("beta", repr(float(state.beta)))
    put("sampler", state.sampler)
    if state.sampler == "lmc":
        put("lmc_phi", _fmt_array(state.lmc_params.phi))
        put("lmc_noise", _fmt_array(state.lmc_params.task_noise))
    elif state.sampler == "conv":
        put("conv_gains", _fmt_array(state.conv_gains))
        put("conv_scales", _fmt_array(state.conv_scales))
        put("conv_noise", _fmt_array(state.conv_noise))
        put("conv_inducing_times", _fmt_array(state.conv_inducing_times))
    for f in fields(TrainConfig):
        put(f"cfg.{f.name}", repr(getattr(state.cfg, f.name)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_state(path: str) -> ModelState:
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, val = line.partition("=")
            kv[key] = val
    version = int(kv.get("format_version", "-1"))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")

    cfg_kwargs = {}
    for f in fields(TrainConfig):
        raw = kv[f"cfg.{f.name}"]
        cfg_kwargs[f.name] = _parse_literal(raw)
    cfg = TrainConfig(**cfg_kwargs)

    sampler = kv["sampler"]
    lmc_params = None
    conv_gains = conv_scales = conv_noise = conv_z = None
    if sampler == "lmc":
        lmc_params = LmcParams(
            phi=_parse_array(kv["lmc_phi"]), task_noise=_parse_array(kv["lmc_noise"])
        )
    elif sampler == "conv":
        conv_gains = _parse_array(kv["conv_gains"])
        conv_scales = _parse_array(kv["conv_scales"])
        conv_noise = _parse_array(kv["conv_noise"])
        conv_z = _parse_array(kv["conv_inducing_times"])

    return ModelState(
        times=_parse_array(kv["times"]),
        time_offset=float(kv["time_offset"]),
        time_span=float(kv["time_span"]),
        mask=_parse_array(kv["mask"], dtype=float).astype(bool),
        imputed=_parse_array(kv["imputed"]),
        offsets=_parse_array(kv["offsets"]),
        scales=_parse_array(kv["scales"]),
        dim_names=tuple(kv["dim_names"].split("|")) if kv["dim_names"] else (),
        active_dims=_parse_array(kv["active_dims"], dtype=float).astype(int),
        dropped_dims=tuple(int(x) for x in kv["dropped_dims"].split(",") if x),
        post=VariationalPosterior(_parse_array(kv["mu_bar"]), _parse_array(kv["lambda"])),
        dyn_kernel=_parse_kernel(kv["dyn_kernel"]),
        map_kernel=_parse_kernel(kv["map_kernel"]),
        inducing=InducingSet(_parse_array(kv["inducing"])),
        beta=float(kv["beta"]),
        sampler=sampler,
        lmc_params=lmc_params,
        conv_gains=conv_gains,
        conv_scales=conv_scales,
        conv_noise=conv_noise,
        conv_inducing_times=conv_z,
        cfg=cfg,
    )

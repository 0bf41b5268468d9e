"""Plain-text job files: one `key = value` assignment per line.

A job file names the engine build geometry, the matrix job to run on
it, and where the operands come from.  `#` starts a comment, blank
lines are skipped, keys may appear once.  Unknown keys are rejected so
a typo cannot silently fall back to a default.

Recognized keys:

  L, H, P            engine array geometry (defaults 12, 4, 3)
  watchdog_factor    cycle budget multiplier (default 4.0)
  M, N, K            matrix dimensions (required)
  mode               performance | fault_tolerant (default fault_tolerant)
  operand_seed       seed for synthetic uniform [-1, 1] operands (default 0)
  mem_image          path to a memory image instead of synthetic operands
  x_addr, w_addr,    explicit operand region bases; give all four or none
  y_addr, z_addr     (default: packed back to back from address 0)
  capacity           memory size in words (default: end of the layout)
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .engine import EngineConfig, JobDescriptor, Mode, Variant, default_layout, golden_matmul
from .faults import seed_operands, unpack_rows
from .memory import Tcdm

__all__ = ["JobFileError", "JobSetup", "parse_jobfile", "build_tcdm"]


class JobFileError(ValueError):
    """A job file could not be parsed or is internally inconsistent."""


@dataclass(frozen=True)
class JobSetup:
    cfg: EngineConfig
    job: JobDescriptor
    capacity: int
    operand_seed: int
    mem_image: str | None


_INT_KEYS = {
    "L", "H", "P", "M", "N", "K",
    "x_addr", "w_addr", "y_addr", "z_addr",
    "capacity", "operand_seed",
}
_FLOAT_KEYS = {"watchdog_factor"}
_STR_KEYS = {"mode", "mem_image"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS
_ADDR_KEYS = ("x_addr", "w_addr", "y_addr", "z_addr")

_MODES = {m.value: m for m in Mode}


def parse_jobfile(path: str) -> JobSetup:
    vals: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not sep or not key or not value:
                raise JobFileError(f"{path}:{lineno}: expected 'key = value'")
            if key not in _ALL_KEYS:
                raise JobFileError(f"{path}:{lineno}: unknown key {key!r}")
            if key in vals:
                raise JobFileError(f"{path}:{lineno}: duplicate key {key!r}")
            if key in _INT_KEYS:
                try:
                    vals[key] = int(value, 0)
                except ValueError:
                    raise JobFileError(f"{path}:{lineno}: {key} needs an integer") from None
            elif key in _FLOAT_KEYS:
                try:
                    vals[key] = float(value)
                except ValueError:
                    raise JobFileError(f"{path}:{lineno}: {key} needs a number") from None
            else:
                vals[key] = value

    for req in ("M", "N", "K"):
        if req not in vals:
            raise JobFileError(f"{path}: missing required key {req!r}")
    mode_name = vals.get("mode", Mode.FAULT_TOLERANT.value)
    if mode_name not in _MODES:
        raise JobFileError(f"{path}: mode must be one of {sorted(_MODES)}")
    if "mem_image" in vals and "operand_seed" in vals:
        raise JobFileError(f"{path}: give either mem_image or operand_seed, not both")

    cfg = EngineConfig(
        L=vals.get("L", 12),
        H=vals.get("H", 4),
        P=vals.get("P", 3),
        watchdog_factor=vals.get("watchdog_factor", 4.0),
    )
    given = [k for k in _ADDR_KEYS if k in vals]
    if given and len(given) != len(_ADDR_KEYS):
        missing = sorted(set(_ADDR_KEYS) - set(given))
        raise JobFileError(f"{path}: explicit layout needs all four bases, missing {missing}")
    M, N, K = vals["M"], vals["N"], vals["K"]
    if given:
        addrs = {k: vals[k] for k in _ADDR_KEYS}
        nw = (N + 1) // 2
        end = max(
            addrs["x_addr"] + M * ((K + 1) // 2),
            addrs["w_addr"] + K * nw,
            addrs["y_addr"] + M * nw,
            addrs["z_addr"] + M * nw,
        )
    else:
        lay = default_layout(M, N, K)
        addrs = {k: lay[k] for k in _ADDR_KEYS}
        end = lay["capacity"]
    capacity = vals.get("capacity", end)

    mem_image = vals.get("mem_image")
    if mem_image is not None and not os.path.isabs(mem_image):
        mem_image = os.path.join(os.path.dirname(os.path.abspath(path)), mem_image)

    job = JobDescriptor(M=M, N=N, K=K, mode=_MODES[mode_name], **addrs)
    return JobSetup(
        cfg=cfg,
        job=job,
        capacity=capacity,
        operand_seed=vals.get("operand_seed", 0),
        mem_image=mem_image,
    )


def build_tcdm(setup: JobSetup, variant: Variant):
    """Materialize the memory for one setup: (tcdm, (x, w, y), golden_z)."""
    ecc = variant is not Variant.BASELINE
    job = setup.job
    if setup.mem_image is not None:
        tcdm = Tcdm.load_image(setup.mem_image)
        if tcdm.ecc != ecc:
            raise JobFileError(
                f"memory image ECC flag ({tcdm.ecc}) does not match the {variant.value} build"
            )
        x = unpack_rows(tcdm, job.x_addr, job.M, job.K)
        w = unpack_rows(tcdm, job.w_addr, job.K, job.N)
        y = unpack_rows(tcdm, job.y_addr, job.M, job.N)
    else:
        tcdm = Tcdm(setup.capacity, ecc=ecc)
        x, w, y = seed_operands(tcdm, job, setup.operand_seed)
    return tcdm, (x, w, y), golden_matmul(x, w, y)

"""Versioned binary file formats for datasets and checkpoints.

Everything on disk is little-endian with 32-bit reals; in-memory arrays are
float64. Magic + version are checked on read and any mismatch is a hard
error — no silent coercion.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .envsim import (
    DemoDataset,
    DemoRecord,
    DomainStyle,
    Modality,
    Observation,
    Phase,
)
from .errors import DataFormatError

DATASET_MAGIC = b"VIBD1"
CHECKPOINT_MAGIC = b"VIBC1"
FORMAT_VERSION = 1

_MODALITY_IDS = {Modality.RGB_LIKE: 0, Modality.DEPTH_LIKE: 1}
_MODALITY_FROM_ID = {v: k for k, v in _MODALITY_IDS.items()}
SHARED_DECODER_ID = 255  # checkpoint holds a CF shared decoder, not one modality

_DOMAIN_IDS = {DomainStyle.SIM_STYLE: 0, DomainStyle.REAL_STYLE: 1}
_DOMAIN_FROM_ID = {v: k for k, v in _DOMAIN_IDS.items()}


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _unpack(fmt: str, fh):
    fmt = "<" + fmt
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))


def _write_array_f32(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array_f32(fh, shape) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(fh, 4 * count)
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


# ---------------------------------------------------------------------------
# dataset files


def write_dataset(path, dataset: DemoDataset) -> None:
    """Serialize a demo dataset under the VIBD1 layout."""
    if len(dataset) == 0:
        raise DataFormatError("refusing to write an empty dataset")
    modalities = sorted(dataset.records[0].obs, key=lambda m: _MODALITY_IDS[m])
    shapes = {m: dataset.records[0].obs[m].grid.shape for m in modalities}
    action_dim = int(np.asarray(dataset.records[0].action).size)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<B", len(modalities)))
        for m in modalities:
            fh.write(struct.pack("<B", _MODALITY_IDS[m]))
            fh.write(struct.pack("<B", len(shapes[m])))
            fh.write(struct.pack(f"<{len(shapes[m])}I", *shapes[m]))
        fh.write(struct.pack("<II", action_dim, len(dataset)))
        for rec in dataset.records:
            for m in modalities:
                if rec.obs[m].grid.shape != shapes[m]:
                    raise DataFormatError(
                        f"inconsistent obs shape {rec.obs[m].grid.shape} for {m}"
                    )
            if np.asarray(rec.action).size != action_dim:
                raise DataFormatError(f"inconsistent action size in record t={rec.t}")
            fh.write(
                struct.pack(
                    "<IIBB",
                    rec.episode_id,
                    rec.t,
                    _DOMAIN_IDS[rec.domain_style],
                    rec.phase.value,
                )
            )
            for m in modalities:
                _write_array_f32(fh, rec.obs[m].grid)
            _write_array_f32(fh, np.asarray(rec.action))


def read_dataset(path) -> DemoDataset:
    """Parse a VIBD1 file back into a DemoDataset (float64 in memory)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 5)
        if magic != DATASET_MAGIC:
            raise DataFormatError(f"bad dataset magic {magic!r}, expected {DATASET_MAGIC!r}")
        (version,) = _unpack("H", fh)
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported dataset version {version}")
        (n_mod,) = _unpack("B", fh)
        modalities, shapes = [], {}
        for _ in range(n_mod):
            (mid,) = _unpack("B", fh)
            if mid not in _MODALITY_FROM_ID:
                raise DataFormatError(f"unknown modality id {mid}")
            m = _MODALITY_FROM_ID[mid]
            (ndim,) = _unpack("B", fh)
            shapes[m] = tuple(_unpack(f"{ndim}I", fh))
            modalities.append(m)
        action_dim, n_records = _unpack("II", fh)
        records = []
        for _ in range(n_records):
            episode_id, t, domain_id, phase_id = _unpack("IIBB", fh)
            if domain_id not in _DOMAIN_FROM_ID:
                raise DataFormatError(f"unknown domain id {domain_id}")
            domain = _DOMAIN_FROM_ID[domain_id]
            obs = {}
            for m in modalities:
                obs[m] = Observation(
                    grid=_read_array_f32(fh, shapes[m]), modality=m, domain_style=domain
                )
            action = _read_array_f32(fh, (action_dim,))
            records.append(
                DemoRecord(
                    episode_id=episode_id,
                    t=t,
                    domain_style=domain,
                    obs=obs,
                    action=action,
                    phase=Phase(phase_id),
                )
            )
        trailing = fh.read(1)
        if trailing:
            raise DataFormatError("trailing bytes after declared record count")
    return DemoDataset(records)


# ---------------------------------------------------------------------------
# checkpoint files


@dataclass
class CheckpointHeader:
    modality_id: int  # 0 rgb, 1 depth, 255 shared CF decoder
    latent_dim: int
    mc_samples: int
    beta_target: float
    anneal_steps: int
    step: int
    sim_success: float


def modality_id(modality: Modality | None) -> int:
    return SHARED_DECODER_ID if modality is None else _MODALITY_IDS[modality]


def modality_from_id(mid: int) -> Modality | None:
    if mid == SHARED_DECODER_ID:
        return None
    if mid not in _MODALITY_FROM_ID:
        raise DataFormatError(f"unknown modality id {mid}")
    return _MODALITY_FROM_ID[mid]


def write_checkpoint(path, header: CheckpointHeader, params) -> None:
    """Serialize named parameter arrays under the VIBC1 layout.

    params is any mapping name -> ndarray iterated in a stable order.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(
            struct.pack(
                "<BIIfII",
                header.modality_id,
                header.latent_dim,
                header.mc_samples,
                header.beta_target,
                header.anneal_steps,
                header.step,
            )
        )
        fh.write(struct.pack("<f", header.sim_success))
        names = list(params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.asarray(params[name])
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            _write_array_f32(fh, arr)


def read_checkpoint(path):
    """Parse a VIBC1 file; returns (CheckpointHeader, dict name -> float64 array)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 5)
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(
                f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}"
            )
        (version,) = _unpack("H", fh)
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        mid, latent_dim, mc_samples, beta_target, anneal_steps, step = _unpack("BIIfII", fh)
        (sim_success,) = _unpack("f", fh)
        header = CheckpointHeader(
            modality_id=mid,
            latent_dim=latent_dim,
            mc_samples=mc_samples,
            beta_target=float(beta_target),
            anneal_steps=anneal_steps,
            step=step,
            sim_success=float(sim_success),
        )
        (n_params,) = _unpack("I", fh)
        params = {}
        for _ in range(n_params):
            (name_len,) = _unpack("H", fh)
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = _unpack("B", fh)
            shape = tuple(_unpack(f"{ndim}I", fh))
            params[name] = _read_array_f32(fh, shape)
        trailing = fh.read(1)
        if trailing:
            raise DataFormatError("trailing bytes after declared parameter count")
    return header, params


def checkpoint_header_for(policy, step: int, sim_success: float) -> CheckpointHeader:
    return CheckpointHeader(
        modality_id=modality_id(policy.modality),
        latent_dim=policy.latent_dim,
        mc_samples=policy.mc_samples,
        beta_target=policy.beta_target,
        anneal_steps=policy.anneal_steps,
        step=step,
        sim_success=sim_success,
    )


def apply_checkpoint(policy, params: dict):
    """A copy of policy carrying the checkpoint's parameters (shape-checked)."""
    from .autodiff import ParameterSet

    expected = {k: v.shape for k, v in policy.params.items()}
    got = {k: v.shape for k, v in params.items()}
    if expected != got:
        missing = set(expected) ^ set(got)
        detail = f"name mismatch {sorted(missing)}" if missing else "shape mismatch"
        raise DataFormatError(f"checkpoint does not match policy: {detail}")
    return replace(policy, params=ParameterSet({k: params[k] for k in policy.params}))

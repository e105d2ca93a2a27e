"""On-disk formats: chip store, checkpoints and PGM/PPM images.

Chip store record layout (all little-endian)::

    b"SVTA" | u16 version | u32 height | u32 width | u32 bands
    | float32 payload, band-major then row-major | u32 CRC32 of everything before it

A store file is a sequence of such records.  Metadata lives in a JSON
sidecar next to it (``<file>.json``), holding one entry per record.

Checkpoint layout::

    b"SVTC" | u16 version | u32 len + config JSON | u64 step | u32 n_tensors
    | per tensor: u16 name len, name, u8 ndim, u32 dims..., float32 values,
      then float32 first and second AdamW moments (zeros when absent)
    | u32 CRC32
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import CorruptStoreError, MissingArtifactError

STORE_MAGIC = b"SVTA"
STORE_VERSION = 1
CKPT_MAGIC = b"SVTC"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sHIII")
UNKNOWN = "unknown"


# --- chip store -------------------------------------------------------------------

def encode_record(data: np.ndarray) -> bytes:
    """One record from an (H, W, bands) array."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"chip store records are (H, W, bands), got shape {arr.shape}")
    h, w, b = arr.shape
    payload = np.ascontiguousarray(arr.transpose(2, 0, 1), dtype="<f4").tobytes()
    body = _HEADER.pack(STORE_MAGIC, STORE_VERSION, h, w, b) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def decode_records(blob: bytes, source: str = "<bytes>") -> list[np.ndarray]:
    out = []
    pos = 0
    while pos < len(blob):
        if len(blob) - pos < _HEADER.size:
            raise CorruptStoreError(f"{source}: truncated header at byte {pos}")
        magic, version, h, w, b = _HEADER.unpack_from(blob, pos)
        if magic != STORE_MAGIC:
            raise CorruptStoreError(f"{source}: bad magic {magic!r} at byte {pos}")
        if version != STORE_VERSION:
            raise CorruptStoreError(f"{source}: unsupported version {version}")
        n = h * w * b * 4
        end = pos + _HEADER.size + n
        if end + 4 > len(blob):
            raise CorruptStoreError(f"{source}: truncated payload in record {len(out)}")
        (crc,) = struct.unpack_from("<I", blob, end)
        if zlib.crc32(blob[pos:end]) != crc:
            raise CorruptStoreError(f"{source}: CRC mismatch in record {len(out)}")
        arr = np.frombuffer(blob, dtype="<f4", count=h * w * b, offset=pos + _HEADER.size)
        out.append(arr.reshape(b, h, w).transpose(1, 2, 0).astype(np.float32))
        pos = end + 4
    return out


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def write_store(path, arrays: Sequence[np.ndarray], metadata: dict | None = None,
                records: Sequence[dict] | None = None) -> None:
    """Write records and a sidecar ``{"store": metadata, "records": [...]}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(encode_record(a) for a in arrays))
    recs = list(records) if records is not None else [{} for _ in arrays]
    if len(recs) != len(arrays):
        raise ValueError("one metadata entry per record is required")
    doc = {"format": "SVTA", "version": STORE_VERSION, "store": metadata or {}, "records": recs}
    sidecar_path(path).write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n")


def read_store(path) -> tuple[list[np.ndarray], dict, list]:
    """Return ``(arrays, store_metadata, record_metadata)``.

    A missing sidecar is tolerated: metadata comes back marked ``unknown``.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"chip store {path} not found")
    arrays = decode_records(path.read_bytes(), str(path))
    side = sidecar_path(path)
    if side.exists():
        doc = json.loads(side.read_text())
        return arrays, doc.get("store", {}), doc.get("records", [])
    return arrays, {"status": UNKNOWN}, [{"status": UNKNOWN} for _ in arrays]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --- checkpoints -----------------------------------------------------------------

def _f32(t: torch.Tensor | None, shape) -> bytes:
    if t is None:
        return np.zeros(shape, dtype="<f4").tobytes()
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def encode_checkpoint(model: torch.nn.Module, config: dict, opt=None) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    step = 0 if opt is None else int(opt.step)
    tensors = list(model.state_dict().items())
    buf.write(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION))
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    buf.write(struct.pack("<QI", step, len(tensors)))
    for name, t in tensors:
        raw = name.encode()
        shape = tuple(t.shape)
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
        buf.write(_f32(t.float() if t.dtype != torch.bool else t.to(torch.float32), shape))
        m1 = opt.exp_avg.get(name) if opt is not None else None
        m2 = opt.exp_avg_sq.get(name) if opt is not None else None
        buf.write(_f32(m1, shape) + _f32(m2, shape))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> dict:
    """Parse a checkpoint into ``{"config", "step", "tensors", "exp_avg", "exp_avg_sq"}``."""
    if len(blob) < 10 or blob[:4] != CKPT_MAGIC:
        raise CorruptStoreError(f"{source}: not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptStoreError(f"{source}: checkpoint CRC mismatch")
    try:
        pos = 4
        (version,) = struct.unpack_from("<H", body, pos)
        pos += 2
        if version != CKPT_VERSION:
            raise CorruptStoreError(f"{source}: unsupported checkpoint version {version}")
        (n_cfg,) = struct.unpack_from("<I", body, pos)
        pos += 4
        config = json.loads(body[pos:pos + n_cfg].decode())
        pos += n_cfg
        step, n = struct.unpack_from("<QI", body, pos)
        pos += 12
        tensors, m1s, m2s = {}, {}, {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + ln].decode()
            pos += ln
            (nd,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{nd}I", body, pos)
            pos += 4 * nd
            count = int(np.prod(shape)) if nd else 1
            vals = []
            for _k in range(3):
                a = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape)
                vals.append(torch.from_numpy(a.astype(np.float32)))
                pos += 4 * count
            tensors[name], m1s[name], m2s[name] = vals
        if pos != len(body):
            raise CorruptStoreError(f"{source}: trailing bytes in checkpoint")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptStoreError(f"{source}: malformed checkpoint ({exc})") from exc
    return {"config": config, "step": step, "tensors": tensors, "exp_avg": m1s, "exp_avg_sq": m2s}


def save_checkpoint(path, state_or_model, config: dict | None = None, opt=None) -> None:
    """Save an ``EncoderState`` (or a bare model with explicit config/optimizer state)."""
    model = getattr(state_or_model, "model", state_or_model)
    if config is None:
        cfg = getattr(state_or_model, "config", None)
        config = cfg.to_dict() if hasattr(cfg, "to_dict") else {}
    if opt is None:
        opt = getattr(state_or_model, "opt", None)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, config, opt))


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} not found")
    return decode_checkpoint(path.read_bytes(), str(path))


def restore_model(model: torch.nn.Module, ckpt: dict) -> torch.nn.Module:
    """Load checkpoint tensors into ``model``, keeping the model's dtypes."""
    current = model.state_dict()
    missing = set(current) ^ set(ckpt["tensors"])
    if missing:
        raise CorruptStoreError(f"checkpoint/model tensor mismatch: {sorted(missing)[:5]}")
    model.load_state_dict({k: ckpt["tensors"][k].to(current[k].dtype) for k in current})
    return model


def restore_optimizer(ckpt: dict, model: torch.nn.Module):
    from .encoder import OptimizerState
    opt = OptimizerState(step=int(ckpt["step"]))
    for name, p in model.named_parameters():
        if ckpt["step"] > 0:
            opt.exp_avg[name] = ckpt["exp_avg"][name].to(p.dtype)
            opt.exp_avg_sq[name] = ckpt["exp_avg_sq"][name].to(p.dtype)
    return opt


# --- images -------------------------------------------------------------------------

RGB_BANDS = (0, 2, 1)  # MODIS bands 1, 3, 2 in this pipeline's 14-band order


def _to_u16(img: np.ndarray) -> np.ndarray:
    v = np.nan_to_num(np.clip(np.asarray(img, np.float64), 0.0, 1.0))
    return np.rint(v * 65535.0).astype(">u2")


def write_pgm(path, band: np.ndarray) -> None:
    """16-bit binary PGM of a [0, 1] single-band image."""
    h, w = band.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + _to_u16(band).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """16-bit binary PPM of an (H, W, 3) [0, 1] image."""
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n65535\n".encode() + _to_u16(rgb).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read back a 16-bit PGM/PPM written by this module, scaled to [0, 1]."""
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    kind, dims, maxval, data = parts
    w, h = map(int, dims.split())
    ch = 3 if kind == b"P6" else 1
    arr = np.frombuffer(data, dtype=">u2").reshape(h, w, ch) / float(int(maxval))
    return arr[..., 0] if ch == 1 else arr


def triptych(original: np.ndarray, masked: np.ndarray, recon: np.ndarray, bands=RGB_BANDS,
             gap: int = 2) -> np.ndarray:
    """Side-by-side original | masked | reconstructed panels of ``bands`` from (H, W, 14) chips."""
    panels = [np.asarray(x)[..., list(bands)] for x in (original, masked, recon)]
    h = panels[0].shape[0]
    sep = np.ones((h, gap, len(bands)))
    return np.concatenate([panels[0], sep, panels[1], sep, panels[2]], axis=1)

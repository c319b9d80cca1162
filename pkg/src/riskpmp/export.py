"""Exchange formats for grid processes.

CSV: one row per (path, step) with the node time and the block components.
Binary dump: magic "RPMP1", then header int64 little-endian (n, d, K, M, seed)
followed by the float64 little-endian payload in C order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RPMP1"
# n, d, K, M as signed 64-bit; seed unsigned so the full 64-bit seed range fits
_HEADER = struct.Struct("<4qQ")


def write_csv(path, nodes: np.ndarray, values: np.ndarray, prefix: str = "x") -> None:
    """Write a (M, S, r) block as rows (path, step, t, prefix_0..prefix_{r-1})."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 3:
        raise ValueError("values must have shape (n_paths, n_nodes, width)")
    m, s, r = values.shape
    if len(nodes) != s:
        raise ValueError("nodes length does not match the block's time axis")
    paths = np.repeat(np.arange(m), s)
    steps = np.tile(np.arange(s), m)
    times = np.tile(np.asarray(nodes, dtype=float), m)
    table = np.column_stack([paths, steps, times, values.reshape(m * s, r)])
    header = "path,step,t," + ",".join(f"{prefix}_{i}" for i in range(r))
    fmt = ["%d", "%d", "%.17g"] + ["%.17g"] * r
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt=fmt)


def write_dump(path, values: np.ndarray, state_dim: int, noise_dim: int,
               n_steps: int, n_paths: int, seed: int) -> None:
    """Write the binary dump: magic, header (n, d, K, M, seed), float64 payload."""
    values = np.ascontiguousarray(np.asarray(values, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(state_dim, noise_dim, n_steps, n_paths, seed))
        fh.write(values.tobytes())


def read_dump(path) -> tuple[dict, np.ndarray]:
    """Read a binary dump back; returns (header dict, flat float64 payload)."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError("not a RPMP1 dump (bad magic)")
    n, d, k, m, seed = _HEADER.unpack_from(raw, len(MAGIC))
    payload = np.frombuffer(raw, dtype="<f8", offset=len(MAGIC) + _HEADER.size)
    header = {"state_dim": n, "noise_dim": d, "n_steps": k, "n_paths": m, "seed": seed}
    return header, payload

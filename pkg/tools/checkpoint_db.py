"""Store parameter checkpoints in a SQLite database."""

from __future__ import annotations

import argparse
import json
import logging
import sqlite3
from pathlib import Path
from typing import Any

import numpy as np

from der.errors import CheckpointError
from der.qnets import MixerKind, NetDims, ParamStore

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

_SCHEMA = """
CREATE TABLE header (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE tensors (
    role TEXT NOT NULL,
    name TEXT NOT NULL,
    shape TEXT NOT NULL,
    data BLOB NOT NULL,
    PRIMARY KEY (role, name)
);
"""


def save_checkpoint(path: str | Path, params: ParamStore, t_step: int) -> Path:
    """Write online and target tensors; an existing file at ``path`` is replaced."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.unlink(missing_ok=True)
    dims = {**vars(params.dims), "agent_hidden": list(params.dims.agent_hidden)}
    with sqlite3.connect(tmp) as conn:
        conn.executescript(_SCHEMA)
        conn.executemany(
            "INSERT INTO header (key, value) VALUES (?, ?)",
            [
                ("format_version", str(FORMAT_VERSION)),
                ("mixer", params.mixer.value),
                ("dims", json.dumps(dims)),
                ("t_step", str(t_step)),
            ],
        )
        for role, tensors in (("online", params.online), ("target", params.target)):
            conn.executemany(
                "INSERT INTO tensors (role, name, shape, data) VALUES (?, ?, ?, ?)",
                [
                    (role, name, json.dumps(list(value.shape)), np.ascontiguousarray(value, dtype="<f8").tobytes())
                    for name, value in tensors.items()
                ],
            )
    conn.close()
    tmp.replace(path)
    logger.info("saved checkpoint %s at t_step %d", path, t_step)
    return path


def _read(path: Path) -> tuple[dict[str, str], list[sqlite3.Row]]:
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with sqlite3.connect(f"file:{path}?mode=ro", uri=True) as conn:
            conn.row_factory = sqlite3.Row
            header = {row["key"]: row["value"] for row in conn.execute("SELECT key, value FROM header")}
            rows = conn.execute("SELECT role, name, shape, data FROM tensors ORDER BY rowid").fetchall()
        conn.close()
    except sqlite3.DatabaseError as exc:
        raise CheckpointError(f"{path} is not a checkpoint database: {exc}") from exc
    return header, rows


def load_checkpoint(path: str | Path) -> tuple[ParamStore, int]:
    path = Path(path)
    header, rows = _read(path)
    version = header.get("format_version")
    if version != str(FORMAT_VERSION):
        raise CheckpointError(f"{path}: format version {version!r}, expected {FORMAT_VERSION}")
    try:
        raw_dims = json.loads(header["dims"])
        dims = NetDims(**{**raw_dims, "agent_hidden": tuple(raw_dims["agent_hidden"])})
        mixer = MixerKind(header["mixer"])
        t_step = int(header["t_step"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete header: {exc}") from exc
    tensors: dict[str, dict[str, np.ndarray]] = {"online": {}, "target": {}}
    for row in rows:
        shape = tuple(json.loads(row["shape"]))
        value = np.frombuffer(row["data"], dtype="<f8").astype(np.float64).reshape(shape)
        value.flags.writeable = False
        tensors[row["role"]][row["name"]] = value
    if tensors["online"].keys() != tensors["target"].keys():
        raise CheckpointError(f"{path}: online and target tensor sets differ")
    logger.info("loaded checkpoint %s at t_step %d", path, t_step)
    return ParamStore(dims, mixer, tensors["online"], tensors["target"]), t_step


def describe(path: str | Path) -> list[dict[str, Any]]:
    """Tensor listing with shapes and Frobenius norms."""
    _, rows = _read(Path(path))
    listing = []
    for row in rows:
        value = np.frombuffer(row["data"], dtype="<f8")
        listing.append(
            {
                "role": row["role"],
                "name": row["name"],
                "shape": json.loads(row["shape"]),
                "norm": float(np.linalg.norm(value)),
            }
        )
    return listing


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="List the tensors stored in a checkpoint")
    parser.add_argument("db_path", help="Path to the checkpoint database")
    parser.add_argument("--role", choices=["online", "target"], help="Only list one parameter copy")
    args = parser.parse_args()
    for entry in describe(args.db_path):
        if args.role and entry["role"] != args.role:
            continue
        print(f"{entry['role']:<7} {entry['name']:<28} {str(tuple(entry['shape'])):<12} {entry['norm']:.6g}")

"""Single-file binary container: version byte, JSON manifest, raw payload."""

from __future__ import annotations

import json
import struct
from pathlib import Path


class ContainerError(ValueError):
    pass


def write_container(path, version: int, manifest: dict, payload: bytes) -> None:
    """Write `<version:1B><manifest_len:u32 LE><manifest JSON><payload>`."""
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<B", version))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)


def read_container(path, expected_version: int) -> tuple[dict, bytes]:
    """Read a container written by write_container, checking the version byte."""
    data = Path(path).read_bytes()
    if len(data) < 5:
        raise ContainerError(f"{path}: truncated container")
    version = data[0]
    if version != expected_version:
        raise ContainerError(
            f"{path}: unsupported container version {version} (expected {expected_version})"
        )
    (mlen,) = struct.unpack_from("<I", data, 1)
    if 5 + mlen > len(data):
        raise ContainerError(f"{path}: manifest length exceeds file size")
    manifest = json.loads(data[5 : 5 + mlen].decode("utf-8"))
    return manifest, data[5 + mlen :]

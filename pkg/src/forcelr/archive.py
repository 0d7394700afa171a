"""Model archives: a JSON manifest plus one little-endian float32 blob per tensor.

Layout::

    model/
      manifest.json
      blobs/<layer>.<param>.f32
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .nn.net import MicroNet, from_description

FORMAT_VERSION = "forcelr-archive/1"
_LE_F32 = np.dtype("<f4")


class ArchiveError(ValueError):
    pass


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(net: MicroNet, path, provenance: dict | None = None,
               extra: dict | None = None) -> Path:
    """Write ``net`` to the directory ``path``, replacing any previous archive there."""
    path = Path(path)
    params = net.named_params()
    tensors = []
    for name, arr in params.items():
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32-le",
                        "file": f"blobs/{name}.f32", "bytes": int(arr.size * 4)})
    manifest = {"format_version": FORMAT_VERSION, "architecture": net.describe(),
                "tensors": tensors, "provenance": provenance or {}}
    if extra:
        manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        (tmp / "blobs").mkdir()
        for t in tensors:
            blob = np.ascontiguousarray(params[t["name"]], dtype=_LE_F32).tobytes()
            (tmp / t["file"]).write_bytes(blob)
        (tmp / "manifest.json").write_text(dumps_json(manifest), encoding="utf-8")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ArchiveError(f"{path}: no manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{path}: manifest is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ArchiveError(f"{path}: unsupported archive format {version!r}")
    return manifest


def load_model(path) -> tuple[MicroNet, dict]:
    path = Path(path)
    manifest = read_manifest(path)
    params = {}
    try:
        for t in manifest["tensors"]:
            expected = int(np.prod(t["shape"], dtype=np.int64)) * 4
            if t.get("bytes") != expected:
                raise ArchiveError(f"{t['name']}: declared {t.get('bytes')} bytes, shape needs {expected}")
            blob_path = path / t["file"]
            if not blob_path.is_file():
                raise ArchiveError(f"{t['name']}: missing blob {t['file']}")
            raw = blob_path.read_bytes()
            if len(raw) != expected:
                raise ArchiveError(f"{t['name']}: blob has {len(raw)} bytes, expected {expected}")
            params[t["name"]] = np.frombuffer(raw, dtype=_LE_F32).astype(np.float32).reshape(t["shape"])
        net = from_description(manifest["architecture"], params)
    except ArchiveError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"{path}: corrupt archive: {exc}") from exc
    declared = {t["name"] for t in manifest["tensors"]}
    if declared != set(net.named_params()):
        raise ArchiveError(f"{path}: tensors {sorted(declared)} do not match the architecture")
    return net, manifest


def resave(src, dst) -> Path:
    """Load an archive and write it back unchanged (used to check round-trips)."""
    net, manifest = load_model(src)
    extra = {k: v for k, v in manifest.items()
             if k not in ("format_version", "architecture", "tensors", "provenance")}
    return save_model(net, dst, manifest.get("provenance"), extra)

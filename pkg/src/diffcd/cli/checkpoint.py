"""Checkpoint container: ``manifest.json`` plus ``params.bin``.

``params.bin`` is the concatenation of one CDT1 blob per parameter in sorted
name order.  The manifest indexes each blob by name, shape, byte offset and
byte length, and echoes the run configuration.
"""

from __future__ import annotations

import json
from pathlib import Path

import diffcd
from diffcd.errors import LoadError
from diffcd.numerics import Tensor, blob

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PARAMS = "params.bin"


def dump_json(path, obj) -> None:
    """Stable JSON: sorted keys, fixed indentation, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_checkpoint(out_dir, kind: str, params: dict[str, Tensor], config: dict,
                    extra: dict | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    chunks = []
    offset = 0
    for name in sorted(params):
        data = blob.encode(params[name])
        index.append({"name": name, "shape": list(params[name].shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "versions": {"diffcd": diffcd.__version__, "tensor_blob": blob.MAGIC.decode()},
        "config": config,
        "params": index,
    }
    if extra:
        manifest.update(extra)
    (out / PARAMS).write_bytes(b"".join(chunks))
    dump_json(out / MANIFEST, manifest)
    return manifest


def load_checkpoint(ckpt_dir, kind: str | None = None) -> tuple[dict[str, Tensor], dict]:
    """Return ``(params, manifest)``; parameters come back with ``requires_grad`` set."""
    root = Path(ckpt_dir)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
        buf = (root / PARAMS).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {root}: {exc}") from exc
    except ValueError as exc:
        raise LoadError(f"{root / MANIFEST}: corrupt manifest ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"{root}: unsupported checkpoint format {manifest.get('format_version')!r}")
    if kind is not None and manifest.get("kind") != kind:
        raise LoadError(f"{root}: expected a {kind} checkpoint, found {manifest.get('kind')!r}")
    params = {}
    end = 0
    for entry in manifest["params"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(buf):
            raise LoadError(f"{root}: parameter {entry['name']} runs past the end of {PARAMS}")
        t, stop = blob.decode(buf[start : start + nbytes])
        if stop != nbytes or list(t.shape) != entry["shape"]:
            raise LoadError(f"{root}: parameter {entry['name']} does not match its index entry")
        params[entry["name"]] = Tensor(t.data, requires_grad=True)
        end = max(end, start + nbytes)
    if end != len(buf):
        raise LoadError(f"{root}: {len(buf) - end} unindexed bytes in {PARAMS}")
    return params, manifest

"""Checkpoint directory format: manifest.json plus one flat little-endian tensor
archive per network. Each record is (name, dtype tag, shape, raw bytes); files
carry sha256 checksums in the manifest and a format version gate."""

import hashlib
import json
import os
import struct

import numpy as np
import torch

FORMAT_VERSION = 1
MAGIC = b"VTPT"

_DTYPE_TAGS = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
    torch.uint8: 3,
    torch.bool: 4,
    torch.int32: 5,
    torch.float16: 6,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_NP_OF = {
    torch.float32: np.float32, torch.float64: np.float64, torch.int64: np.int64,
    torch.uint8: np.uint8, torch.bool: np.bool_, torch.int32: np.int32,
    torch.float16: np.float16,
}


class CheckpointVersionError(RuntimeError):
    pass


class CheckpointCorruptError(RuntimeError):
    pass


def write_archive(path: str, tensors: dict) -> str:
    """Write named tensors to one archive file; returns its sha256 hex digest."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, t in tensors.items():
            t = t.detach().contiguous().cpu()
            if t.dtype not in _DTYPE_TAGS:
                raise ValueError(f"unsupported dtype {t.dtype} for tensor {name!r}")
            raw = t.numpy().astype(_NP_OF[t.dtype], copy=False)
            if raw.dtype.byteorder == ">":
                raw = raw.byteswap().view(raw.dtype.newbyteorder("<"))
            payload = raw.tobytes()
            nm = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nm)))
            fh.write(nm)
            fh.write(struct.pack("<BB", _DTYPE_TAGS[t.dtype], t.dim()))
            for d in t.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
    return _sha256(path)


def read_archive(path: str, expect_sha: str | None = None) -> dict:
    if expect_sha is not None and _sha256(path) != expect_sha:
        raise CheckpointCorruptError(f"checksum mismatch for {path}")
    tensors = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointCorruptError(f"{path} is not a tensor archive")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"{path}: format version {version}, expected {FORMAT_VERSION}"
            )
        while True:
            head = fh.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode("utf-8")
            tag, ndim = struct.unpack("<BB", fh.read(2))
            if tag not in _TAG_DTYPES:
                raise CheckpointCorruptError(f"{path}: unknown dtype tag {tag}")
            shape = [struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim)]
            (nbytes,) = struct.unpack("<Q", fh.read(8))
            payload = fh.read(nbytes)
            if len(payload) != nbytes:
                raise CheckpointCorruptError(f"{path}: truncated record {name!r}")
            dt = _TAG_DTYPES[tag]
            arr = np.frombuffer(payload, dtype=_NP_OF[dt]).reshape(shape).copy()
            tensors[name] = torch.from_numpy(arr)
    return tensors


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path: str, manifest: dict, networks: dict):
    """networks: {name: {tensor_name: Tensor}}. manifest gains format_version,
    per-network file names and checksums."""
    os.makedirs(path, exist_ok=True)
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["networks"] = {}
    for name, tensors in networks.items():
        fname = f"{name}.bin"
        sha = write_archive(os.path.join(path, fname), tensors)
        manifest["networks"][name] = {"file": fname, "sha256": sha,
                                      "n_tensors": len(tensors)}
    tmp = os.path.join(path, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(path, "manifest.json"))


def load_checkpoint(path: str) -> tuple:
    """Returns (manifest, {network: {tensor_name: Tensor}}); verifies version
    and checksums."""
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no manifest.json under {path}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: manifest format version {version}, expected {FORMAT_VERSION}"
        )
    networks = {}
    for name, info in manifest.get("networks", {}).items():
        networks[name] = read_archive(os.path.join(path, info["file"]),
                                      expect_sha=info["sha256"])
    return manifest, networks


def state_dict_tensors(module: torch.nn.Module) -> dict:
    return {k: v for k, v in module.state_dict().items()}


def checkpoint_hash(path: str, network: str) -> str:
    manifest, _ = load_checkpoint(path)
    return manifest["networks"][network]["sha256"]


def module_hash(module: torch.nn.Module) -> str:
    """Content hash over a module's state dict (names, shapes, and bytes)."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()

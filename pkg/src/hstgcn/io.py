"""On-disk formats: tensor archives, network documents, long-format series, navigation logs.

A tensor archive is a magic line, the byte length of a JSON manifest, the
manifest itself and a little-endian blob. The manifest lists every tensor's
name, dtype, shape and byte offset plus a sha256 of the blob.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .features import NavigationLog
from .network import RoadNetwork


class ArchiveError(ValueError):
    pass


_DTYPES = {"f8": "<f8", "i8": "<i8"}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_archive(path, magic: str, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        kind = "i8" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        table.append({"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    doc = dict(manifest)
    doc["tensors"] = table
    doc["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    text = json.dumps(doc, sort_keys=True, indent=1).encode()
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{len(text)}\n".encode())
        fh.write(text)
        fh.write(b"\n")
        fh.write(blob)


def read_archive(path, magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    try:
        head, size, rest = data.split(b"\n", 2)
        size = int(size)
    except ValueError:
        raise ArchiveError(f"{path}: not a tensor archive (truncated header)") from None
    if head.decode(errors="replace") != magic:
        raise ArchiveError(f"{path}: expected a {magic!r} file, found {head[:40]!r}")
    try:
        manifest = json.loads(rest[:size])
    except ValueError as exc:
        raise ArchiveError(f"{path}: corrupt manifest ({exc})") from None
    blob = rest[size + 1:]
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise ArchiveError(f"{path}: tensor data is corrupt (checksum mismatch)")
    tensors = {}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float64 if entry["dtype"] == "f8" else np.int64)
    return manifest, tensors


# ------------------------------------------------------------------- network
def write_network(net: RoadNetwork, path) -> None:
    doc = {
        "nodes": [[repr(float(x)), repr(float(y))] for x, y in net.node_xy],
        "segments": [
            {"id": i, "tail": int(net.tail[i]), "head": int(net.head[i]), "class": net.road_class[i],
             "length_m": repr(float(net.length_m[i])), "free_speed_kmh": repr(float(net.free_speed_kmh[i])),
             "successors": [int(j) for j in net.successors[i]]}
            for i in range(net.n)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_network(path) -> RoadNetwork:
    doc = json.loads(Path(path).read_text())
    segs = sorted(doc["segments"], key=lambda s: s["id"])
    if [s["id"] for s in segs] != list(range(len(segs))):
        raise ValueError(f"{path}: segment ids must be 0..n-1")
    return RoadNetwork(
        length_m=np.array([float(s["length_m"]) for s in segs]),
        road_class=tuple(s["class"] for s in segs),
        free_speed_kmh=np.array([float(s["free_speed_kmh"]) for s in segs]),
        tail=np.array([s["tail"] for s in segs]),
        head=np.array([s["head"] for s in segs]),
        node_xy=np.array([[float(x), float(y)] for x, y in doc["nodes"]]),
        successors=[list(s["successors"]) for s in segs],
    )


# -------------------------------------------------------------------- series
def write_series(values: np.ndarray, path, integer: bool = False) -> None:
    """Long format ``segment,slot,value`` in segment-major order."""
    values = np.asarray(values)
    n, S = values.shape
    seg = np.repeat(np.arange(n), S)
    slot = np.tile(np.arange(S), n)
    with open(path, "w") as fh:
        fh.write("segment,slot,value\n")
        if integer:
            np.savetxt(fh, np.c_[seg, slot, values.ravel()].astype(np.int64), fmt="%d", delimiter=",")
        else:
            rows = "\n".join(f"{a},{b},{v!r}" for a, b, v in zip(seg.tolist(), slot.tolist(), values.ravel().tolist()))
            fh.write(rows + "\n")


def read_series(path, n: int | None = None, n_slots: int | None = None, integer: bool = False) -> np.ndarray:
    """Dense ``n x S`` matrix; absent cells are NaN (or an error for integer series)."""
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    seg = raw[:, 0].astype(np.int64)
    slot = raw[:, 1].astype(np.int64)
    n = int(seg.max()) + 1 if n is None else n
    S = int(slot.max()) + 1 if n_slots is None else n_slots
    if np.any((seg < 0) | (seg >= n) | (slot < 0) | (slot >= S)):
        raise ValueError(f"{path}: (segment, slot) outside {n} x {S}")
    out = np.full((n, S), np.nan)
    out[seg, slot] = raw[:, 2]
    if integer:
        if np.isnan(out).any():
            raise ValueError(f"{path}: missing volume cells")
        return out.astype(np.int64)
    return out


# ------------------------------------------------------------ navigation log
def write_navlog(log: NavigationLog, path) -> None:
    """One record per line: ``route_id launch seg:slot seg:slot ...``."""
    seg = log.hop_segment.astype(str)
    slot = log.hop_slot.astype(str)
    hops = np.char.add(np.char.add(seg, ":"), slot).tolist()
    ptr = log.ptr.tolist()
    with open(path, "w") as fh:
        for r, (rid, psi) in enumerate(zip(log.route_id.tolist(), log.launch.tolist())):
            fh.write(" ".join([str(rid), str(psi)] + hops[ptr[r]:ptr[r + 1]]) + "\n")


def read_navlog(path) -> NavigationLog:
    rid, launch, ptr, seg, slot = [], [], [0], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                rid.append(int(parts[0]))
                launch.append(int(parts[1]))
                for hop in parts[2:]:
                    s, d = hop.split(":")
                    seg.append(int(s))
                    slot.append(int(d))
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed navigation record") from None
            ptr.append(len(seg))
    return NavigationLog(rid, launch, ptr, seg, slot)

"""Byte-stable file writers shared by checkpoints, datasets and tables."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_npz(path, arrays: dict[str, np.ndarray]) -> None:
    """Like ``np.savez`` but with fixed zip timestamps, so equal arrays give equal bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            entry = io.BytesIO()
            np.lib.format.write_array(entry, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH), entry.getvalue())
    Path(path).write_bytes(buf.getvalue())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_jsonl(path, records, header: dict | None = None) -> None:
    lines = []
    if header is not None:
        lines.append(json.dumps({"header": header}, sort_keys=True))
    lines.extend(json.dumps(r, sort_keys=True) for r in records)
    Path(path).write_text("\n".join(lines) + "\n")


def read_jsonl(path) -> tuple[dict | None, list[dict]]:
    header, records = None, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "header" in rec and len(rec) == 1:
            header = rec["header"]
        else:
            records.append(rec)
    return header, records


def header_lines(header: dict | None) -> list[str]:
    """Provenance block for text tables: one ``# key<TAB>value`` line per entry."""
    return [f"# {k}\t{header[k]}" for k in sorted(header)] if header else []


def read_header_lines(lines) -> dict[str, str]:
    out = {}
    for line in lines:
        if line.startswith("# ") and "\t" in line:
            key, value = line[2:].split("\t", 1)
            out[key] = value
    return out

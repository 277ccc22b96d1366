"""Portable named-array checkpoint archives.

A checkpoint is a zip file with fixed metadata (so equal contents give
byte-identical files) holding:

    arch.txt      plain-text descriptor; first line is the section header,
                  e.g. [expert] or [rtaw]
    meta.txt      key = value training metadata
    params.index  one line per array: name<TAB>comma-separated shape
    params/<name> raw little-endian float32 bytes, C order

Save then load returns bitwise-equal parameter arrays.
"""

import io
import zipfile

import numpy as np

__all__ = ["save_archive", "load_archive"]

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_archive(path, section, arch_text, meta, params):
    """Write a checkpoint archive.

    meta is a {key: value} dict (stringified); params maps names to arrays,
    stored as little-endian float32.
    """
    arch_full = f"[{section}]\n{arch_text.rstrip()}\n"
    meta_text = "".join(f"{k} = {meta[k]}\n" for k in sorted(meta))
    names = sorted(params)
    index = "".join(
        f"{n}\t{','.join(str(d) for d in params[n].shape)}\n" for n in names
    )
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "arch.txt", arch_full.encode())
        _write_entry(zf, "meta.txt", meta_text.encode())
        _write_entry(zf, "params.index", index.encode())
        for n in names:
            arr = np.ascontiguousarray(params[n], dtype="<f4")
            _write_entry(zf, f"params/{n}", arr.tobytes())


def load_archive(path, expect_section=None):
    """Read a checkpoint archive back; returns (section, arch_text, meta, params)."""
    with zipfile.ZipFile(path, "r") as zf:
        arch_full = zf.read("arch.txt").decode()
        meta_text = zf.read("meta.txt").decode()
        index = zf.read("params.index").decode()
        first, _, arch_text = arch_full.partition("\n")
        if not (first.startswith("[") and first.endswith("]")):
            raise ValueError(f"checkpoint missing section header: {path}")
        section = first[1:-1]
        if expect_section is not None and section != expect_section:
            raise ValueError(
                f"expected a [{expect_section}] checkpoint, found [{section}]: {path}"
            )
        meta = {}
        for line in meta_text.splitlines():
            if line.strip():
                k, _, v = line.partition(" = ")
                meta[k] = v
        params = {}
        for line in index.splitlines():
            if not line.strip():
                continue
            name, _, shape_s = line.partition("\t")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            raw = zf.read(f"params/{name}")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return section, arch_text, meta, params

"""Parameter checkpoints: a directory of KPST files plus a manifest.

Layout::

    manifest.txt   one "name<TAB>filename" line per tensor
    config.txt     key=value echo of the settings the tensors were built for
    <name>.kpst    one file per tensor
"""
from __future__ import annotations

import os
from pathlib import Path

from .errors import FormatError
from .tensor import tensor_io_read, tensor_io_write

MANIFEST = "manifest.txt"
CONFIG = "config.txt"


def save_checkpoint(directory, tensors, config=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in tensors.items():
        if "\t" in name or "/" in name or name.startswith("."):
            raise ValueError(f"bad tensor name {name!r}")
        fname = f"{name}.kpst"
        tensor_io_write(arr, d / fname)
        lines.append(f"{name}\t{fname}\n")
    (d / MANIFEST).write_text("".join(lines), encoding="utf-8")
    if config is not None:
        body = "".join(f"{k}={v}\n" for k, v in config.items())
        (d / CONFIG).write_text(body, encoding="utf-8")


def load_checkpoint(directory):
    """Returns ``(tensors, config)``; ``config`` is a dict of strings."""
    d = Path(directory)
    manifest = d / MANIFEST
    if not manifest.is_file():
        raise FormatError(f"{d}: missing {MANIFEST}")
    tensors = {}
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{manifest}:{lineno}: expected name<TAB>filename")
        name, fname = parts
        if os.sep in fname or fname.startswith(".."):
            raise FormatError(f"{manifest}:{lineno}: filename escapes the checkpoint")
        try:
            tensors[name] = tensor_io_read(d / fname)
        except FormatError as exc:
            raise FormatError(f"{d / fname}: {exc}") from None
    config = {}
    cfg_path = d / CONFIG
    if cfg_path.is_file():
        for line in cfg_path.read_text(encoding="utf-8").splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                config[k.strip()] = v.strip()
    return tensors, config

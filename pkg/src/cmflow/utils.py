"""Seeding, atomic file writes and thread control."""
from __future__ import annotations

import contextlib
import hashlib
import json
import os
import tempfile

import numpy as np


def derive_seed(seed: int, *labels) -> int:
    """Stable 63-bit sub-seed for ``seed`` under a label path.

    Adding a new labelled consumer never changes the streams of others.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def rng_for(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))


@contextlib.contextmanager
def atomic_open(path, mode: str = "w"):
    """Write to a temp file next to ``path`` and rename on success."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    with atomic_open(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_jsonl(path, rows) -> None:
    with atomic_open(path) as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def file_digest(paths) -> str:
    """Content hash over files (sorted, recursive for directories)."""
    h = hashlib.sha256()
    files = []
    for p in paths:
        p = os.fspath(p)
        if os.path.isdir(p):
            for root, _, names in os.walk(p):
                files.extend(os.path.join(root, n) for n in names)
        elif os.path.exists(p):
            files.append(p)
    for f in sorted(files):
        if os.path.basename(f) == "manifest.json":
            continue
        h.update(os.path.relpath(f).encode())
        with open(f, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
    return h.hexdigest()


def resolve_threads(cli_value: int | None) -> int | None:
    if cli_value is not None:
        return cli_value
    env = os.environ.get("CMFLOW_THREADS")
    return int(env) if env else None


@contextlib.contextmanager
def thread_limit(n: int | None):
    """Cap BLAS/OpenMP threads for the duration of the block."""
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


"""Delimited output and the run manifest.

Every run directory gets exactly one ``manifest.json`` listing every file
the run wrote, with content digests.  CSV cells carry full float
precision (``repr``) so identical runs are byte-identical.
"""

import csv
import hashlib
import json
import time
from pathlib import Path

import numpy as np

__all__ = ["format_cell", "write_csv", "file_sha256", "RunWriter"]


def format_cell(value) -> str:
    """Canonical text for one CSV cell."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    # newline="" so the csv module controls line endings (CRLF)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


class RunWriter:
    """Collects the files one subcommand writes and seals the manifest."""

    def __init__(self, out_dir, subcommand, config_sha256, seed,
                 overrides=(), version="0"):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.subcommand = subcommand
        self.config_sha256 = config_sha256
        self.seed = seed
        self.overrides = list(overrides)
        self.version = version
        self._names = []
        self._t0 = time.perf_counter()

    def path(self, name) -> Path:
        return self.out_dir / name

    def _record(self, name):
        if name in self._names:
            raise ValueError(f"file '{name}' written twice in one run")
        self._names.append(name)

    def csv(self, name, header, rows) -> Path:
        target = self.path(name)
        write_csv(target, header, rows)
        self._record(name)
        return target

    def text(self, name, body) -> Path:
        target = self.path(name)
        with open(target, "w", newline="", encoding="utf-8") as fh:
            fh.write(body)
        self._record(name)
        return target

    def figure(self, fig, name) -> Path:
        target = self.path(name)
        fig.savefig(target)
        self._record(name)
        return target

    def finish(self) -> Path:
        files = [{"name": name,
                  "sha256": file_sha256(self.path(name)),
                  "bytes": self.path(name).stat().st_size}
                 for name in sorted(self._names)]
        manifest = {
            "subcommand": self.subcommand,
            "version": self.version,
            "seed": self.seed,
            "config_sha256": self.config_sha256,
            "overrides": self.overrides,
            "created_unix": int(time.time()),
            "wall_clock_seconds": round(time.perf_counter() - self._t0, 6),
            "files": files,
        }
        target = self.path("manifest.json")
        with open(target, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return target

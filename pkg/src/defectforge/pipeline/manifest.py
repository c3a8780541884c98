"""Dataset manifests: JSON files listing every sample with content hashes.

Paths inside a manifest are relative to the manifest's own directory, so a
dataset tree can be moved or compared byte-for-byte.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ManifestInvalid, NotFound
from ..imgcore import file_sha256, load_image

MANIFEST_NAME = "manifest.json"
FORMAT = "defectforge-manifest/1"


@dataclass
class Manifest:
    dataset_id: str
    kind: str
    config_hash: str
    entries: list = field(default_factory=list)
    root: Path | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    @property
    def path(self):
        return self.root / MANIFEST_NAME

    def resolve(self, rel):
        return (self.root / rel).resolve() if rel is not None else None

    def relative(self, path):
        return Path(os.path.relpath(Path(path).resolve(), self.root.resolve())).as_posix()

    def add(self, sample_id, image, **fields):
        """Register a file written under ``root``; hashes are taken now."""
        entry = {"sample_id": sample_id, "image": self.relative(image),
                 "image_sha256": file_sha256(image)}
        for key in ("mask", "source_normal"):
            p = fields.pop(key, None)
            if p is not None:
                entry[key] = self.relative(p)
                entry[f"{key}_sha256"] = file_sha256(p)
        entry.update(fields)
        self.entries.append(entry)
        return entry

    def image(self, entry, key="image"):
        return load_image(self.resolve(entry[key]))

    def to_dict(self):
        return {"format": FORMAT, "dataset_id": self.dataset_id, "kind": self.kind,
                "config_hash": self.config_hash, **self.extra, "entries": self.entries}

    def save(self):
        self.root.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=False) + "\n")
        return self.path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.is_file():
            raise NotFound(path)
        d = json.loads(path.read_text())
        if d.get("format") != FORMAT:
            raise ManifestInvalid(f"{path}: unknown manifest format {d.get('format')!r}")
        core = {"format", "dataset_id", "kind", "config_hash", "entries"}
        extra = {k: v for k, v in d.items() if k not in core}
        return cls(d["dataset_id"], d["kind"], d["config_hash"], d["entries"], path.parent, extra)

    def problems(self):
        """Every integrity violation found: missing files, hash mismatches, bad gen entries."""
        out = []
        for e in self.entries:
            for key in ("image", "mask", "source_normal"):
                if key not in e:
                    continue
                p = self.resolve(e[key])
                if not p.is_file():
                    out.append(f"{e['sample_id']}: {key} {e[key]} is missing")
                elif file_sha256(p) != e[f"{key}_sha256"]:
                    out.append(f"{e['sample_id']}: {key} {e[key]} hash mismatch")
            if e.get("provenance", "").startswith("gen:"):
                decision = (e.get("filter_report") or {}).get("decision")
                if decision != "Desired":
                    out.append(f"{e['sample_id']}: generative entry has decision {decision!r}")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ManifestInvalid(f"{self.path}: " + "; ".join(problems[:20]))
        return self

"""Experiment manifests: an ordered list of pipeline steps with hashed inputs.

A manifest is a TOML document::

    id = "my-experiment"
    seed = 0

    [inputs]                       # optional files from outside the run
    corpus = { path = "data/hmr.txt", sha256 = "..." }

    [[phase]]
    name = "bpe"
    op = "learn-bpe"
    inputs = { corpus = "input:corpus" }
    config = { bpe = { num_merges = 500 } }

    [[phase]]
    name = "vocab"
    op = "build-vocab"
    inputs = { corpus = "input:corpus", merges = "bpe:merges.txt" }

An input reference is ``input:<name>`` (a declared file, resolved relative to
the manifest) or ``<phase>:<file>`` (an output of an earlier phase). Each
phase writes into ``<out>/<phase name>/``. Before a phase runs, the SHA-256
of every input is checked against the declared hash or against the hash
recorded when the producing phase finished. The run record ``run.json``
lists every phase's resolved config, input and output hashes and summary.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .config import ResolvedConfig, load_toml
from .errors import ConfigError, ManifestError
from .ops import OPS, run_op

log = logging.getLogger(__name__)

RUN_RECORD = "run.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Phase:
    name: str
    op: str
    inputs: dict[str, str] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int | None = None


@dataclass
class ExperimentManifest:
    id: str
    seed: int
    phases: list[Phase]
    inputs: dict[str, dict] = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "ExperimentManifest":
        unknown = set(doc) - {"id", "seed", "inputs", "phase"}
        if unknown:
            raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
        if "id" not in doc:
            raise ManifestError("manifest needs an 'id'")
        phases = []
        for i, p in enumerate(doc.get("phase", [])):
            extra = set(p) - {"name", "op", "inputs", "config", "seed"}
            if extra:
                raise ManifestError(f"phase {i}: unknown keys {sorted(extra)}")
            if "name" not in p or "op" not in p:
                raise ManifestError(f"phase {i}: needs 'name' and 'op'")
            phases.append(Phase(p["name"], p["op"], dict(p.get("inputs", {})), dict(p.get("config", {})),
                                p.get("seed")))
        declared = {}
        for name, spec in doc.get("inputs", {}).items():
            spec = {"path": spec} if isinstance(spec, str) else dict(spec)
            if "path" not in spec or set(spec) - {"path", "sha256"}:
                raise ManifestError(f"input {name!r} must be a path or {{path, sha256}}")
            declared[name] = spec
        m = cls(doc["id"], int(doc.get("seed", 0)), phases, declared, Path(base_dir))
        m.validate()
        return m

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        path = Path(path)
        try:
            doc = load_toml(path)
        except ConfigError as exc:
            raise ManifestError(str(exc)) from None
        return cls.from_dict(doc, path.parent)

    def validate(self):
        """Static checks: known ops, unique names, references only backwards."""
        seen: set[str] = set()
        for p in self.phases:
            if p.op not in OPS:
                raise ManifestError(f"phase {p.name!r}: unknown op {p.op!r}")
            if p.name in seen or p.name == "input" or "/" in p.name or ":" in p.name:
                raise ManifestError(f"phase name {p.name!r} is duplicated or invalid")
            for key, ref in p.inputs.items():
                src, sep, rest = ref.partition(":")
                if not sep or not rest:
                    raise ManifestError(f"phase {p.name!r}: input {key}={ref!r} is not 'input:<name>' "
                                        f"or '<phase>:<file>'")
                if src == "input":
                    if rest not in self.inputs:
                        raise ManifestError(f"phase {p.name!r}: undeclared input {rest!r}")
                elif src not in seen:
                    raise ManifestError(f"phase {p.name!r}: {ref!r} refers to a phase that has not run yet")
            try:
                ResolvedConfig(p.config, OPS[p.op].sections)
            except ConfigError as exc:
                raise ManifestError(f"phase {p.name!r}: {exc}") from None
            seen.add(p.name)


def bundled_manifest(name: str) -> Path:
    """Path of a manifest shipped with the package (``name`` without ``.toml``)."""
    ref = resources.files("relm") / "manifests" / f"{name}.toml"
    if not ref.is_file():
        raise ManifestError(f"no bundled manifest named {name!r}")
    return Path(str(ref))


def resolve_manifest(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    return bundled_manifest(str(name_or_path))


def run_manifest(manifest: ExperimentManifest, out_dir, seed: int | None = None) -> dict:
    """Run every phase in order; returns (and writes) the run record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_seed = manifest.seed if seed is None else seed
    produced: dict[str, dict[str, str]] = {}
    record = {"id": manifest.id, "seed": base_seed, "relm_threads": os.environ.get("RELM_THREADS", "1"),
              "numpy": np.__version__, "phases": []}
    for phase in manifest.phases:
        spec = OPS[phase.op]
        inputs, hashes = {}, {}
        for key, ref in phase.inputs.items():
            path, expected = _resolve_ref(manifest, out, produced, ref)
            digest = sha256_file(path)
            if expected is not None and digest != expected:
                raise ManifestError(f"phase {phase.name!r}: input {ref!r} hash {digest[:12]} does not match "
                                    f"the recorded {expected[:12]}")
            inputs[key] = path
            hashes[key] = {"ref": ref, "sha256": digest}
        cfg = ResolvedConfig(phase.config, spec.sections)
        phase_seed = base_seed if phase.seed is None else phase.seed
        phase_out = out / phase.name
        if phase_out.exists():  # stale files from an earlier run would pollute the output hashes
            for f in phase_out.iterdir():
                if f.is_file():
                    f.unlink()
        started = time.perf_counter()
        log.info("phase %s (%s) starting", phase.name, phase.op)
        summary = run_op(phase.op, cfg, inputs, phase_out, phase_seed)
        log.info("phase %s finished in %.1fs", phase.name, time.perf_counter() - started)
        outputs = {f.name: sha256_file(f) for f in sorted(phase_out.iterdir()) if f.is_file()}
        produced[phase.name] = outputs
        record["phases"].append({"name": phase.name, "op": phase.op, "seed": phase_seed,
                                 "config": cfg.resolved(), "inputs": hashes, "outputs": outputs,
                                 "summary": summary})
        _write_record(out, record)
    _write_record(out, record)
    return record


def _resolve_ref(manifest, out: Path, produced, ref: str):
    src, _, rest = ref.partition(":")
    if src == "input":
        spec = manifest.inputs[rest]
        path = Path(spec["path"])
        if not path.is_absolute():
            path = manifest.base_dir / path
        if not path.exists():
            raise ManifestError(f"declared input {rest!r} not found at {path}")
        return path, spec.get("sha256")
    if src not in produced:
        raise ManifestError(f"{ref!r}: phase {src!r} has not produced outputs in this run")
    if rest not in produced[src]:
        raise ManifestError(f"{ref!r}: phase {src!r} did not write {rest!r}")
    return out / src / rest, produced[src][rest]


def _write_record(out: Path, record: dict):
    tmp = out / (RUN_RECORD + ".tmp")
    tmp.write_text(json.dumps(record, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, out / RUN_RECORD)


def phase_summary(record: dict, name: str) -> dict:
    for p in record["phases"]:
        if p["name"] == name:
            return p["summary"]
    raise KeyError(name)

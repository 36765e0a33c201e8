"""On-disk formats: environment JSON, feature cache, episode JSONL, checkpoints, manifest."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .render import NUM_VIEWS, VIEW_ELEVATIONS, VIEW_HEADINGS
from .vocab import Vocab
from .world import Environment, Episode, WorldSpec

FORMAT_VERSION = 1
FEATURE_BIN = "features.bin"
FEATURE_INDEX = "features.json"


class ArtifactError(RuntimeError):
    """Missing or hash-mismatched upstream artifact."""


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def env_to_dict(env: Environment) -> dict:
    return {
        "env_id": env.env_id,
        "nodes": [{"id": n, "xyz": env.positions[i].tolist()} for i, n in enumerate(env.node_ids)],
        "edges": [{"a": a, "b": b, "len": float(length)} for a, b, length in env.edges],
        "panoramas": {
            n: [{"theta": float(VIEW_HEADINGS[k]), "phi": float(VIEW_ELEVATIONS[k]),
                 "grid": env.grids[i, k].ravel().tolist()} for k in range(NUM_VIEWS)]
            for i, n in enumerate(env.node_ids)
        },
        "appearance_table": {str(c): np.asarray(v).tolist() for c, v in sorted(env.appearance_table.items())},
        "provenance": env.provenance,
        "edit_config": env.edit_config,
        "domain": env.domain,
        "style_field": env.style_field.tolist(),
        "view_styles": env.view_styles.tolist(),
        "world": {"spec": env.spec.to_dict(), "seed": env.world_seed},
    }


def env_from_dict(d: dict, features: np.ndarray) -> Environment:
    spec = WorldSpec.from_dict(d["world"]["spec"])
    node_ids = [n["id"] for n in d["nodes"]]
    grids = np.array([[v["grid"] for v in d["panoramas"][n]] for n in node_ids], dtype=np.int64)
    return Environment(
        env_id=d["env_id"],
        node_ids=node_ids,
        positions=np.array([n["xyz"] for n in d["nodes"]], dtype=np.float64),
        edges=[(e["a"], e["b"], float(e["len"])) for e in d["edges"]],
        grids=grids.reshape(len(node_ids), NUM_VIEWS, spec.grid_h, spec.grid_w),
        features=features,
        appearance_table={int(c): np.array(v, dtype=np.float64) for c, v in d["appearance_table"].items()},
        style_field=np.array(d["style_field"], dtype=np.float64),
        view_styles=np.array(d["view_styles"], dtype=np.float64),
        spec=spec,
        world_seed=int(d["world"]["seed"]),
        provenance=d["provenance"],
        domain=d.get("domain", "seen"),
        edit_config=d.get("edit_config"),
    )


def save_environments(envs: Sequence[Environment], directory: Path) -> None:
    """One JSON file per environment plus a shared little-endian float32 feature cache."""
    directory = Path(directory)
    (directory / "envs").mkdir(parents=True, exist_ok=True)
    records = []
    offset = 0
    dim = envs[0].spec.feature_dim if envs else 0
    with open(directory / FEATURE_BIN, "wb") as fh:
        for env in envs:
            _dump(env_to_dict(env), directory / "envs" / f"{env.env_id}.json")
            block = np.ascontiguousarray(env.features, dtype="<f4")
            for i, node in enumerate(env.node_ids):
                for k in range(NUM_VIEWS):
                    records.append({"env_id": env.env_id, "viewpoint_id": node, "view_index": k, "offset": offset})
                    offset += 4 * dim
            fh.write(block.tobytes())
    _dump({"D": dim, "dtype": "<f4", "records": records}, directory / FEATURE_INDEX)


def load_environments(directory: Path) -> dict[str, Environment]:
    directory = Path(directory)
    index = json.loads((directory / FEATURE_INDEX).read_text())
    raw = np.fromfile(directory / FEATURE_BIN, dtype="<f4")
    dim = index["D"]
    by_key = {(r["env_id"], r["viewpoint_id"], r["view_index"]): r["offset"] // 4 for r in index["records"]}
    envs = {}
    for path in sorted((directory / "envs").glob("*.json")):
        d = json.loads(path.read_text())
        node_ids = [n["id"] for n in d["nodes"]]
        feats = np.empty((len(node_ids), NUM_VIEWS, dim))
        for i, node in enumerate(node_ids):
            for k in range(NUM_VIEWS):
                start = by_key[(d["env_id"], node, k)]
                feats[i, k] = raw[start: start + dim]
        envs[d["env_id"]] = env_from_dict(d, feats)
    return envs


def save_episodes(episodes: Iterable[Episode], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_dict(), sort_keys=True) + "\n")


def load_episodes(path: Path) -> list[Episode]:
    with open(path) as fh:
        return [Episode.from_dict(json.loads(line)) for line in fh if line.strip()]


def save_checkpoint(module: Optional[torch.nn.Module], directory: Path, descriptor: dict,
                    blob_name: str = "model.pt") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if module is not None:
        torch.save(module.state_dict(), directory / blob_name)
    _dump({"format_version": FORMAT_VERSION, "blob": blob_name if module is not None else None, **descriptor},
          directory / "descriptor.json")


def load_descriptor(directory: Path) -> dict:
    path = Path(directory) / "descriptor.json"
    if not path.exists():
        raise ArtifactError(f"no checkpoint descriptor at {path}")
    d = json.loads(path.read_text())
    if d.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"unsupported checkpoint format {d.get('format_version')} in {path}")
    return d


def load_state(directory: Path, descriptor: dict) -> dict:
    return torch.load(Path(directory) / descriptor["blob"], map_location="cpu", weights_only=True)


def vocab_from_descriptor(descriptor: dict) -> Vocab:
    vocab = Vocab(descriptor["vocab"])
    if vocab.digest() != descriptor.get("vocab_hash", vocab.digest()):
        raise ArtifactError("vocabulary hash mismatch in checkpoint descriptor")
    return vocab


def file_digest(path: Path) -> str:
    """sha256 of a file, or of all files under a directory in sorted relative-path order."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    if not files:
        raise ArtifactError(f"artifact {path} is missing or empty")
    for f in files:
        h.update(str(f.relative_to(path if path.is_dir() else path.parent)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


class Manifest:
    """Registry of artifact name -> (relative path, content hash) for a workspace."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {"artifacts": {}, "configs": {}}

    def register(self, name: str, rel_path: str, config: Optional[dict] = None) -> str:
        digest = file_digest(self.root / rel_path)
        self.data["artifacts"][name] = {"path": rel_path, "sha256": digest}
        if config is not None:
            self.data["configs"][name] = config
        self.save()
        return digest

    def require(self, name: str) -> Path:
        entry = self.data["artifacts"].get(name)
        if entry is None:
            raise ArtifactError(f"artifact {name!r} not registered in {self.path}")
        path = self.root / entry["path"]
        if not path.exists():
            raise ArtifactError(f"artifact {name!r} missing at {path}")
        if file_digest(path) != entry["sha256"]:
            raise ArtifactError(f"artifact {name!r} at {path} does not match its recorded hash")
        return path

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self.data["artifacts"] if n.startswith(prefix))

    def save(self) -> None:
        _dump(self.data, self.path)


def workspace_root(out: Optional[str]) -> Path:
    root = out or os.environ.get("ENVEDIT_WORKSPACE")
    if not root:
        raise ArtifactError("no workspace given: pass --out or set ENVEDIT_WORKSPACE")
    return Path(root)

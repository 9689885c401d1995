"""Configuration loading and the end-to-end reconstruction pipeline.

Settings resolve in order: explicit overrides (command-line flags), then a
JSON config file, then the packaged ``defaults.json``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from facegeom.evaluation import EvalConfig
from facegeom.lifting import lift_maps_to_mesh
from facegeom.maps import MapPaths, load_map_stack, read_pfm
from facegeom.meshio import read_template, write_ply
from facegeom.nonrigid import RegistrationConfig, register
from facegeom.refine import RefineConfig, refine_mesh, write_refined_ply
from facegeom.rigid import RansacConfig, estimate_affine_ransac, match_embedding_nn

log = logging.getLogger("facegeom")

SECTIONS = {
    "ransac": RansacConfig,
    "registration": RegistrationConfig,
    "refine": RefineConfig,
    "evaluation": EvalConfig,
}


def default_settings() -> dict:
    text = resources.files("facegeom").joinpath("defaults.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(base, update, where=""):
    for key, value in update.items():
        if key not in base:
            raise ValueError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config key {where}{key!r} must be an object")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value
    return base


def parse_assignment(text):
    """``section.key=value`` (value parsed as JSON when possible) to a nested dict."""
    if "=" not in text:
        raise ValueError(f"expected section.key=value, got {text!r}")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = cur = {}
    keys = path.strip().split(".")
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value
    return out


def resolve_settings(config_path=None, overrides=()) -> dict:
    settings = default_settings()
    if config_path is not None:
        with open(config_path, encoding="utf-8") as fh:
            _merge(settings, json.load(fh))
    for upd in overrides:
        _merge(settings, upd)
    return settings


@dataclass(frozen=True)
class PipelineConfig:
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    verbosity: int = 0

    @classmethod
    def from_settings(cls, settings: dict) -> "PipelineConfig":
        seed = int(settings.get("seed", 0))
        parts = {}
        for name, kind in SECTIONS.items():
            values = dict(settings.get(name, {}))
            known = {f.name for f in fields(kind)}
            if "seed" in known:
                values["seed"] = seed
            parts[name] = kind(**{k: v for k, v in values.items() if k in known})
        return cls(seed=seed, verbosity=int(settings.get("verbosity", 0)), **parts)

    @classmethod
    def load(cls, config_path=None, overrides=()) -> "PipelineConfig":
        return cls.from_settings(resolve_settings(config_path, overrides))


@dataclass
class ReconstructionResult:
    deformed: object
    refined: object
    transform: object
    trace: object
    texture: object = None
    written: list = field(default_factory=list)


def reconstruct(maps_stem, template_path, out_dir, cfg: PipelineConfig = None,
                skip_refine=False, refine=True) -> ReconstructionResult:
    """Lift the maps, fit the template (affine then non-rigid) and optionally
    refine. Writes ``deformed.ply``, ``trace.jsonl``, ``transform.json`` and,
    unless skipped, ``refined.ply`` into ``out_dir``."""
    cfg = cfg or PipelineConfig()
    stack = load_map_stack(MapPaths.from_stem(maps_stem))
    template = read_template(template_path)
    stack.check_correspondence_bounds(template.embedding)
    target = lift_maps_to_mesh(stack)
    log.info("target: %d vertices, %d faces", target.vertex_count, target.mesh.face_count)

    pairs = match_embedding_nn(template, target)
    transform, inliers = estimate_affine_ransac(pairs, template, target, cfg.ransac)
    log.info("affine init: %d / %d inliers", int(inliers.sum()), len(inliers))

    def report(rec):
        log.info("outer %d: alpha %.6g, %d pairs, %d inner steps, motion %.4f, %s",
                 rec.iteration, rec.alpha_memb, rec.active_pairs, len(rec.inner),
                 rec.mean_motion, rec.match_space)

    deformed, trace = register(template, target, transform, cfg.registration, log=report)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = ReconstructionResult(deformed, None, transform, trace)
    write_ply(out / "deformed.ply", deformed)
    trace.write(out / "trace.jsonl")
    (out / "transform.json").write_text(transform.to_json() + "\n")
    result.written += [out / "deformed.ply", out / "trace.jsonl", out / "transform.json"]
    if refine and not skip_refine:
        refined, texture = refine_mesh(deformed, stack, cfg.refine, return_texture=True)
        write_refined_ply(out / "refined.ply", refined, texture)
        result.refined, result.texture = refined, texture
        result.written.append(out / "refined.ply")
    return result


def settings_snapshot(cfg: PipelineConfig) -> dict:
    """Fully resolved settings as plain JSON types."""
    snap = {name: asdict(getattr(cfg, name)) for name in SECTIONS}
    snap["seed"] = cfg.seed
    snap["verbosity"] = cfg.verbosity
    return snap


def load_stack_depth(path):
    """Depth raster from a PFM file or a map stem (``<stem>.depth.pfm``)."""
    p = Path(path)
    if p.suffix.lower() == ".pfm":
        return np.asarray(read_pfm(p), dtype=np.float64)
    return np.asarray(load_map_stack(MapPaths.from_stem(p)).depth)

"""Scenario configuration: JSON schema, validation and problem building.

A scenario file fully determines a run: mesh (generated from rectangle
regions or loaded from a mesh file), materials per region, the coil drive,
the probe region and the solver options. Unknown keys are errors, not
warnings: a silently ignored typo in a tolerance would corrupt benchmark
comparisons.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources

from .assembly import MaterialTable, SourceSpec
from .errors import ConfigError
from .integrate import AssembledProblem, SolverOptions, discretize
from .materials import NU0, MaterialModel
from .mesh import Mesh2D, RegionTag, generate_rect_mesh, load_mesh

_MESH_KEYS = {"width", "height", "nx", "ny", "regions", "file"}
_REGION_KEYS = {"x0", "x1", "y0", "y1", "tag"}
_MATERIAL_KEYS = {"kappa", "law", "nu", "k1", "k2", "k3"}
_SOURCE_KEYS = {"coil", "i_max", "tau", "turns"}
_SOLVER_KEYS = {
    "pcg_tol", "pcg_max_iter", "strategy", "cspe_window", "pod_window", "tol_pod",
    "tol_update", "safety", "mcc_mode", "mcc_tol", "power_tol", "power_max_iter",
    "seed", "output_every", "dt_override", "combined_recovery", "snapshot_every",
    "newton_tol", "newton_max_iter",
}
_TOP_KEYS = {"mesh", "materials", "source", "probe", "t_end", "solver"}


@dataclass
class Scenario:
    mesh_spec: dict
    materials: MaterialTable
    source: SourceSpec
    probe_id: int
    t_end: float
    options: SolverOptions
    name: str = "scenario"
    region_boxes: list = field(default_factory=list)

    def build_mesh(self) -> Mesh2D:
        spec = self.mesh_spec
        if "file" in spec:
            return load_mesh(spec["file"])
        boxes = [(b["x0"], b["x1"], b["y0"], b["y1"], RegionTag.parse(b["tag"]))
                 for b in self.region_boxes]

        def classify(x, y):
            tag = RegionTag("air")
            for x0, x1, y0, y1, t in boxes:  # later boxes paint over earlier ones
                if x0 <= x < x1 and y0 <= y < y1:
                    tag = t
            return tag

        return generate_rect_mesh(spec["width"], spec["height"],
                                  spec["nx"], spec["ny"], classify)

    def build_problem(self) -> AssembledProblem:
        mesh = self.build_mesh()
        present = {(t.kind, t.id) for t in mesh.element_region}
        kinds = {k for k, _ in present}
        if "conductor" not in kinds:
            raise ConfigError("scenario has no conductor region; the ODE would be empty")
        for kind, rid in sorted(present):
            if kind == "conductor" and rid not in self.materials.conductors:
                raise ConfigError(f"no material declared for conductor region {rid}")
        for rid in self.materials.conductors:
            if ("conductor", rid) not in present:
                raise ConfigError(f"material declared for absent conductor region {rid}")
        if ("coil", self.source.coil_id) not in present:
            raise ConfigError(f"source references absent coil region {self.source.coil_id}")
        for kind, rid in sorted(present):
            if kind == "coil" and rid != self.source.coil_id:
                raise ConfigError(f"coil region {rid} has no excitation entry")
        probes = {t.probe for t in mesh.element_region if t.probe is not None}
        if self.probe_id not in probes:
            raise ConfigError(f"probe region {self.probe_id} not present in the mesh")
        return discretize(mesh, self.materials, self.probe_id)


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise ConfigError(f"missing required key {path}{key!r}")
    return doc[key]


def _check_keys(doc: dict, allowed: set, path: str):
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown key {path}{sorted(unknown)[0]!r}")


def _parse_material(doc: dict, path: str) -> MaterialModel:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must be an object")
    _check_keys(doc, _MATERIAL_KEYS, path + ".")
    law = doc.get("law", "linear")
    kappa = float(doc.get("kappa", 0.0))
    try:
        if law == "linear":
            return MaterialModel.linear(kappa, float(doc.get("nu", NU0)))
        if law == "brauer":
            return MaterialModel.brauer(kappa, float(_require(doc, "k1", path + ".")),
                                        float(_require(doc, "k2", path + ".")),
                                        float(_require(doc, "k3", path + ".")))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"{path}.law must be 'linear' or 'brauer', got {law!r}")


def _parse_materials(doc: dict) -> MaterialTable:
    if not isinstance(doc, dict):
        raise ConfigError("materials must be an object")
    conductors: dict[int, MaterialModel] = {}
    coils: dict[int, MaterialModel] = {}
    air = MaterialModel.linear(0.0, NU0)
    for key, val in doc.items():
        path = f"materials.{key}"
        if key == "air":
            m = _parse_material(val, path)
            if m.kappa != 0:
                raise ConfigError(f"{path}: air must have kappa = 0")
            if m.law != "linear":
                raise ConfigError(f"{path}: nonlinear material on the air region")
            air = m
        elif key.startswith("conductor:"):
            conductors[int(key.split(":", 1)[1])] = _parse_material(val, path)
        elif key.startswith("coil:"):
            m = _parse_material(val, path)
            if m.kappa != 0:
                raise ConfigError(f"{path}: coil regions must have kappa = 0")
            if m.law != "linear":
                raise ConfigError(f"{path}: nonlinear material on a coil region")
            coils[int(key.split(":", 1)[1])] = m
        else:
            raise ConfigError(f"unknown key materials.{key!r}")
    try:
        return MaterialTable(conductors, air, coils)
    except Exception as exc:
        raise ConfigError(f"materials: {exc}") from exc


_FLOAT_OPTS = {"pcg_tol", "tol_pod", "tol_update", "safety", "mcc_tol", "power_tol",
               "newton_tol", "dt_override"}
_INT_OPTS = {"pcg_max_iter", "cspe_window", "pod_window", "power_max_iter", "seed",
             "output_every", "snapshot_every", "newton_max_iter"}
_NULLABLE_OPTS = {"pcg_max_iter", "dt_override", "snapshot_every"}


def _parse_solver(doc: dict) -> SolverOptions:
    _check_keys(doc, _SOLVER_KEYS, "solver.")
    opts = SolverOptions()
    for key, val in doc.items():
        if val is None and key not in _NULLABLE_OPTS:
            raise ConfigError(f"solver.{key} must not be null")
        try:
            if val is not None and key in _FLOAT_OPTS:
                val = float(val)
            elif val is not None and key in _INT_OPTS:
                val = int(val)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"solver.{key}: {exc}") from exc
        setattr(opts, key, val)
    for name in ("pcg_tol", "safety", "mcc_tol", "power_tol", "tol_pod", "newton_tol"):
        if getattr(opts, name) <= 0:
            raise ConfigError(f"solver.{name} must be positive")
    if opts.tol_update < 0:
        raise ConfigError("solver.tol_update must be >= 0")
    if opts.output_every < 1:
        raise ConfigError("solver.output_every must be >= 1")
    if opts.snapshot_every is not None and opts.snapshot_every < 1:
        raise ConfigError("solver.snapshot_every must be >= 1")
    if opts.cspe_window < 1 or opts.pod_window < 1:
        raise ConfigError("solver window sizes must be >= 1")
    if opts.strategy not in ("previous", "cspe", "pod"):
        raise ConfigError(f"solver.strategy must be previous|cspe|pod, got {opts.strategy!r}")
    if opts.mcc_mode not in ("pcg", "lumped"):
        raise ConfigError(f"solver.mcc_mode must be pcg|lumped, got {opts.mcc_mode!r}")
    return opts


def parse_scenario(doc: dict, name: str = "scenario") -> Scenario:
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "")
    mesh_spec = _require(doc, "mesh", "")
    _check_keys(mesh_spec, _MESH_KEYS, "mesh.")
    region_boxes = []
    if "file" in mesh_spec:
        extra = set(mesh_spec) - {"file"}
        if extra:
            raise ConfigError(f"mesh.file excludes other mesh keys: {sorted(extra)}")
    else:
        for key in ("width", "height", "nx", "ny"):
            _require(mesh_spec, key, "mesh.")
        for i, box in enumerate(mesh_spec.get("regions", [])):
            _check_keys(box, _REGION_KEYS, f"mesh.regions[{i}].")
            for key in _REGION_KEYS:
                _require(box, key, f"mesh.regions[{i}].")
            RegionTag.parse(box["tag"])
            region_boxes.append(box)

    materials = _parse_materials(_require(doc, "materials", ""))

    src_doc = _require(doc, "source", "")
    _check_keys(src_doc, _SOURCE_KEYS, "source.")
    try:
        source = SourceSpec(int(_require(src_doc, "coil", "source.")),
                            float(_require(src_doc, "i_max", "source.")),
                            float(_require(src_doc, "tau", "source.")),
                            float(src_doc.get("turns", 1.0)))
    except Exception as exc:
        raise ConfigError(f"source: {exc}") from exc

    probe_id = int(_require(doc, "probe", ""))
    t_end = float(_require(doc, "t_end", ""))
    if t_end <= 0:
        raise ConfigError("t_end must be positive")
    options = _parse_solver(doc.get("solver", {}))

    seed_env = os.environ.get("EDDY2D_SEED")
    if seed_env is not None:
        try:
            options.seed = int(seed_env)
        except ValueError as exc:
            raise ConfigError(f"EDDY2D_SEED must be an integer, got {seed_env!r}") from exc

    return Scenario(mesh_spec, materials, source, probe_id, t_end, options,
                    name=name, region_boxes=region_boxes)


def load_scenario(path) -> Scenario:
    """Load and validate a scenario config; defaults are filled, unknown keys
    rejected with their key path."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from exc
    name = os.path.splitext(os.path.basename(str(path)))[0]
    return parse_scenario(doc, name=name)


def bundled_scenario_path(name: str) -> str:
    """Path of a scenario shipped with the package (e.g. 'plate2d')."""
    base = resources.files("eddy2d") / "scenarios" / f"{name}.json"
    if not base.is_file():
        raise ConfigError(f"no bundled scenario named {name!r}")
    return str(base)


def resolve_config(path_or_name: str) -> str:
    """Accept either a config file path or a bundled scenario name."""
    if os.path.exists(path_or_name):
        return path_or_name
    try:
        return bundled_scenario_path(path_or_name)
    except ConfigError:
        raise ConfigError(f"config {path_or_name!r}: no such file or bundled scenario") from None

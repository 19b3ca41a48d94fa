"""Experiment configuration: one YAML file, validated into :class:`ExperimentConfig`.

Wavenumbers may be given as ``k_low``/``k_high`` or as wavelengths
``lambda_low``/``lambda_high`` (not both for the same band).  The
canonical JSON form of the validated config is hashed and embedded in
every output file.
"""

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from .forward import SolverParams, SourceConfig, aperture_receivers
from .shapes import ShapeError, parse_shapes
from .sphere import LEBEDEV_ORDERS, lebedev_grid

BUILTIN_PROFILES = ("desk", "fullscale")


class ConfigError(ValueError):
    pass


def _vec(value, what):
    try:
        v = [float(c) for c in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a list of three numbers, got {value!r}") from None
    if len(v) != 3:
        raise ConfigError(f"{what} must have three components")
    return v


def _band(doc, name):
    k = doc.get(f"k_{name}")
    lam = doc.get(f"lambda_{name}")
    if (k is None) == (lam is None):
        raise ConfigError(f"give exactly one of k_{name} and lambda_{name}")
    value = float(k) if k is not None else 2 * np.pi / float(lam)
    if not value > 0:
        raise ConfigError(f"{name}-band wavenumber must be positive")
    return value


@dataclass
class ExperimentConfig:
    """Validated experiment description; see ``docs/cli.md`` for the YAML keys."""

    name: str
    shapes: list
    shape_source: object
    contrast: dict
    k_low: float
    k_high: float
    wave_input: dict
    placement: list
    sources: dict
    receivers: dict
    sphere_grid: int
    sampling: dict
    aperture: dict
    dictionary: dict
    noise: dict
    solver: dict
    far_mode: str = "true"
    asymptotic_ratio: float = 10.0
    output: str = "emgest-out"
    base_dir: str = field(default=".", repr=False, compare=False)

    # -- derived objects

    @property
    def wavelength_low(self):
        return 2 * np.pi / self.k_low

    @property
    def wavelength_high(self):
        return 2 * np.pi / self.k_high

    def shape_specs(self):
        return list(self.shapes)

    def grid(self):
        return lebedev_grid(self.sphere_grid)

    def solver_params(self, threads=0):
        s = self.solver
        return SolverParams(tol=s["tol"], maxiter=s["maxiter"], restart=s["restart"],
                            max_voxels=s["max_voxels"], threads=threads)

    def source_config(self):
        return SourceConfig(positions=tuple(map(tuple, self.sources["positions"])),
                            polarization=self.sources["polarization"])

    def receiver_layout(self):
        r = self.receivers
        return aperture_receivers(r["count"], r["width"], r["center"])

    def sampling_center(self):
        c = self.sampling["center"]
        return np.array(self.placement if c is None else c, dtype=float)

    def sampling_spacing(self):
        s = self.sampling["spacing"]
        return self.wavelength_low / 40.0 if s is None else float(s)

    def reference_distance(self):
        r = self.dictionary["reference_distance"]
        return float(np.linalg.norm(self.placement)) if r is None else float(r)

    def to_dict(self):
        return {
            "name": self.name,
            "shapes": self.shape_source,
            "contrast": self.contrast,
            "wave": self.wave_input,
            "placement": self.placement,
            "sources": self.sources,
            "receivers": self.receivers,
            "sphere_grid": self.sphere_grid,
            "sampling": self.sampling,
            "aperture": self.aperture,
            "dictionary": self.dictionary,
            "noise": self.noise,
            "solver": self.solver,
            "far_mode": self.far_mode,
            "asymptotic_ratio": self.asymptotic_ratio,
            "output": self.output,
        }

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def with_overrides(self, seed=None, output=None):
        doc = copy.deepcopy(self.to_dict())
        if seed is not None:
            doc["noise"]["seed"] = int(seed)
        if output is not None:
            doc["output"] = str(output)
        return from_dict(doc, self.base_dir)


DEFAULTS = {
    "name": "experiment",
    "contrast": {"n_inside": 5.0, "resolution": 4, "smoothing": 0.0},
    "placement": [40.0, 0.0, 0.0],
    "sources": {"positions": [[0.0, 0.0, 0.0]], "polarization": [0.0, 0.0, 1.0]},
    "receivers": {"count": 11, "width": 1.0, "center": [0.0, 0.0, 0.0]},
    "sphere_grid": 110,
    "sampling": {"center": None, "spacing": None, "counts": [9, 9, 9], "refine": True},
    "aperture": {"kind": "cap", "half_angle_deg": 60.0},
    "dictionary": {"directions": 26, "file": None, "mode": "far", "reference_distance": None,
                   "on_demand": False, "near_tolerance": 1.0},
    "noise": {"delta": 0.0, "levels": [0.0, 0.01, 0.05, 0.1], "seed": 0},
    "solver": {"tol": 1e-8, "maxiter": 500, "restart": 0, "max_voxels": 400000},
    "far_mode": "true",
    "asymptotic_ratio": 10.0,
    "output": "emgest-out",
}


def _merge(defaults, doc, where):
    out = copy.deepcopy(defaults)
    for key, value in (doc or {}).items():
        if key not in defaults:
            raise ConfigError(f"unknown key {where + str(key)!r}")
        if isinstance(defaults[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            out[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _shapes(value, base_dir):
    if value is None:
        raise ConfigError("config needs a 'shapes' entry")
    try:
        if isinstance(value, str):
            path = value if os.path.isabs(value) else os.path.join(base_dir, value)
            if not os.path.exists(path):
                raise ConfigError(f"shapes file {value!r} does not exist")
            with open(path) as fh:
                shapes, _ = parse_shapes(yaml.safe_load(fh))
        else:
            shapes, _ = parse_shapes({"shapes": value})
    except ShapeError as exc:
        raise ConfigError(str(exc)) from exc
    if not shapes:
        raise ConfigError("no shapes configured")
    ids = [s.id for s in shapes]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate shape ids")
    return shapes


def from_dict(doc, base_dir="."):
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    doc = dict(doc)
    shape_source = doc.pop("shapes", None)
    wave = doc.pop("wave", None)
    if not isinstance(wave, dict):
        raise ConfigError("config needs a 'wave' mapping with k_low/lambda_low and k_high/lambda_high")
    unknown = set(wave) - {"k_low", "k_high", "lambda_low", "lambda_high"}
    if unknown:
        raise ConfigError(f"unknown wave keys {sorted(unknown)}")
    merged = _merge({k: v for k, v in DEFAULTS.items()}, doc, "")
    k_low, k_high = _band(wave, "low"), _band(wave, "high")
    if not 2 * np.pi / k_low > 2 * np.pi / k_high:
        raise ConfigError("the low band needs the longer wavelength (lambda_low > lambda_high)")
    shapes = _shapes(shape_source, base_dir)

    c = merged["contrast"]
    n = c["n_inside"]
    n = complex(*n) if isinstance(n, (list, tuple)) else complex(n)
    if not (n.real > 0 and n.imag >= 0):
        raise ConfigError("n_inside needs a positive real part and non-negative imaginary part")
    if int(c["resolution"]) < 2 or float(c["smoothing"]) < 0:
        raise ConfigError("contrast resolution must be >= 2 and smoothing >= 0")
    merged["contrast"] = {"n_inside": c["n_inside"], "resolution": int(c["resolution"]),
                          "smoothing": float(c["smoothing"])}
    merged["placement"] = _vec(merged["placement"], "placement")
    src = merged["sources"]
    src["positions"] = [_vec(p, "source position") for p in src["positions"]]
    pol = src["polarization"]
    if isinstance(pol, dict):
        raise ConfigError("per-band polarization is not supported in config files; give one 3-vector")
    src["polarization"] = _vec(pol, "polarization")
    rx = merged["receivers"]
    rx["count"], rx["width"], rx["center"] = int(rx["count"]), float(rx["width"]), _vec(rx["center"], "receiver center")
    if rx["count"] < 1 or rx["width"] <= 0:
        raise ConfigError("receivers need count >= 1 and width > 0")
    if int(merged["sphere_grid"]) not in LEBEDEV_ORDERS:
        raise ConfigError(f"sphere_grid must be one of {sorted(LEBEDEV_ORDERS)}")
    merged["sphere_grid"] = int(merged["sphere_grid"])
    smp = merged["sampling"]
    if smp["center"] is not None:
        smp["center"] = _vec(smp["center"], "sampling center")
    if smp["spacing"] is not None and not float(smp["spacing"]) > 0:
        raise ConfigError("sampling spacing must be positive")
    smp["counts"] = [int(v) for v in (smp["counts"] if isinstance(smp["counts"], list) else [smp["counts"]] * 3)]
    ap = merged["aperture"]
    if ap["kind"] not in ("full", "cap"):
        raise ConfigError("aperture kind must be 'full' or 'cap'")
    dic = merged["dictionary"]
    if dic["mode"] not in ("far", "near"):
        raise ConfigError("dictionary mode must be 'far' or 'near'")
    if int(dic["directions"]) not in LEBEDEV_ORDERS:
        raise ConfigError(f"dictionary directions must be one of {sorted(LEBEDEV_ORDERS)}")
    if dic["file"] is not None:
        path = dic["file"] if os.path.isabs(dic["file"]) else os.path.join(base_dir, dic["file"])
        if not os.path.exists(path):
            raise ConfigError(f"dictionary file {dic['file']!r} does not exist")
    noise = merged["noise"]
    noise["levels"] = [float(v) for v in noise["levels"]]
    if float(noise["delta"]) < 0 or any(v < 0 for v in noise["levels"]):
        raise ConfigError("noise levels must be non-negative")
    noise["seed"] = int(noise["seed"])
    if merged["far_mode"] not in ("true", "near"):
        raise ConfigError("far_mode must be 'true' or 'near'")
    z = np.asarray(merged["placement"])
    for p in src["positions"]:
        if np.linalg.norm(z - np.asarray(p)) <= max(s.diameter for s in shapes):
            raise ConfigError("a source lies inside or next to the placed scatterer")

    return ExperimentConfig(
        name=str(merged["name"]),
        shapes=shapes,
        shape_source=shape_source,
        contrast=merged["contrast"],
        k_low=k_low,
        k_high=k_high,
        wave_input=dict(wave),
        placement=merged["placement"],
        sources=src,
        receivers=rx,
        sphere_grid=merged["sphere_grid"],
        sampling=smp,
        aperture=ap,
        dictionary=dic,
        noise=noise,
        solver={k: merged["solver"][k] for k in DEFAULTS["solver"]},
        far_mode=merged["far_mode"],
        asymptotic_ratio=float(merged["asymptotic_ratio"]),
        output=str(merged["output"]),
        base_dir=base_dir,
    )


def load_config(path):
    """Read a YAML config file, or a built-in profile name (``desk``, ``fullscale``)."""
    if not os.path.exists(path) and path in BUILTIN_PROFILES:
        text = resources.files("emgest.data").joinpath(f"{path}.yaml").read_text()
        return from_dict(yaml.safe_load(text), ".")
    if not os.path.exists(path):
        raise ConfigError(f"config file {path!r} not found")
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(doc, os.path.dirname(os.path.abspath(path)))

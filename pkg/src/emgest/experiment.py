"""End-to-end pipeline behind the command-line tool.

Every function takes a validated :class:`~emgest.config.ExperimentConfig`
and writes into an output directory.  All files are deterministic for a
given config, seed and thread count: wall-clock timings go to the
logger only, and the cost summary counts work (solves, operator
applications, inner products) instead of seconds.
"""

import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import dictionary as dictmod
from . import forward, recognition
from .io import atomic_write_text, read_measurement, write_csv, write_measurement
from .shapes import place
from .sphere import cap_mask, lebedev_grid, vsh_basis

log = logging.getLogger(__name__)

BANDS = ("low", "high")


@dataclass
class CostSummary:
    """Work counters per pipeline stage."""

    stages: dict = field(default_factory=dict)

    def add(self, stage, **counts):
        row = self.stages.setdefault(stage, {"solves": 0, "matvecs": 0, "inner_products": 0})
        for key, value in counts.items():
            row[key] += int(value)

    def add_diagnostics(self, stage, diagnostics):
        self.add(stage, solves=len(diagnostics), matvecs=sum(d.matvecs for d in diagnostics))

    def rows(self):
        return [[s, v["solves"], v["matvecs"], v["inner_products"]] for s, v in self.stages.items()]


class Timer:
    def __init__(self):
        self.spans = {}

    def __call__(self, name):
        timer = self

        class _Span:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.spans[name] = timer.spans.get(name, 0.0) + time.perf_counter() - self.t0

        return _Span()


def delta_label(delta):
    return format(delta, "g").replace(".", "p")


def provenance(cfg, **extra):
    doc = {"config_hash": cfg.hash(), "config_name": cfg.name, "seed": cfg.noise["seed"]}
    doc.update(extra)
    return doc


def comments(cfg, **extra):
    out = {"config_hash": cfg.hash(), "seed": cfg.noise["seed"]}
    out.update(extra)
    return out


def band_k(cfg, band):
    return cfg.k_low if band == "low" else cfg.k_high


# -- dictionary -------------------------------------------------------------------------


def dictionary_directions(cfg):
    """Lebedev directions plus the unit vector of the configured placement."""
    dirs = [tuple(d) for d in lebedev_grid(cfg.dictionary["directions"]).nodes]
    z = np.asarray(cfg.placement, float)
    zhat = z / np.linalg.norm(z)
    if max(np.dot(d, zhat) for d in dirs) < 1 - 1e-12:
        dirs.append(tuple(zhat))
    return dirs


def contrast_settings(cfg):
    c = cfg.contrast
    n = c["n_inside"]
    n = complex(*n) if isinstance(n, (list, tuple)) else complex(n)
    return dictmod.ContrastSettings(n, c["resolution"], c["smoothing"])


def build_dictionary(cfg, threads=1):
    params = cfg.solver_params(threads=1)
    receivers = cfg.receiver_layout() if cfg.dictionary["mode"] == "near" else None
    return dictmod.build_dictionary(
        cfg.shape_specs(),
        [cfg.k_high],
        dictionary_directions(cfg),
        polarization=cfg.sources["polarization"],
        params=params,
        contrast=contrast_settings(cfg),
        grid=cfg.grid(),
        receivers=receivers,
        reference_distance=cfg.reference_distance() if receivers is not None else None,
        threads=threads,
    )


def build_report_rows(dictionary):
    rows = []
    for key in sorted(dictionary.entries, key=lambda k: (k.shape_id, k.k, k.direction)):
        m = dictionary.entries[key].meta
        rows.append([key.shape_id, key.k, *key.direction, m["iterations"], m["residual"], m["matvecs"]])
    return rows


BUILD_COLUMNS = ["shape", "k", "d1", "d2", "d3", "iterations", "residual", "matvecs"]


def cmd_build_dict(cfg, out, threads=1):
    os.makedirs(out, exist_ok=True)
    d = build_dictionary(cfg, threads)
    d.provenance = {"config_hash": cfg.hash(), "config_name": cfg.name}
    path = os.path.join(out, "dictionary.emgd")
    dictmod.save(d, path)
    write_csv(os.path.join(out, "build_report.csv"), BUILD_COLUMNS, build_report_rows(d),
              comments(cfg, entries=len(d)))
    return d, path


def obtain_dictionary(cfg, out, threads, costs):
    f = cfg.dictionary["file"]
    if f is not None:
        path = f if os.path.isabs(f) else os.path.join(cfg.base_dir, f)
        d = dictmod.load(path)
        missing = [s.id for s in cfg.shape_specs() if not d.keys_for(s.id, cfg.k_high)]
        if missing:
            raise dictmod.MissingEntryError(f"dictionary {path} lacks shapes {missing} at k = {cfg.k_high:g}")
        return d
    d, _ = cmd_build_dict(cfg, out, threads)
    costs.add("dictionary", solves=len(d), matvecs=sum(e.meta["matvecs"] for e in d.entries.values()))
    return d


# -- measurements -----------------------------------------------------------------------


def simulate_clean(cfg, shape, band, params):
    k = band_k(cfg, band)
    c = contrast_settings(cfg)
    placed = place(shape, cfg.placement, c.n_inside, c.resolution, c.smoothing)
    if band == "low":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            asym = placed.placement.check_asymptotic(shape, cfg.asymptotic_ratio)
        if not asym:
            log.warning("shape %s: |z| below %g x diameter, asymptotic regime not reached",
                        shape.id, cfg.asymptotic_ratio)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return forward.simulate_measurement(
            placed, k, cfg.source_config(), cfg.receiver_layout(), cfg.grid(), params,
            far_mode=cfg.far_mode, asymptotic_ratio=cfg.asymptotic_ratio,
        )


def corrupt(measurement, delta, spec, *stream):
    """Noisy copy of a measurement; near and far fields get separate streams."""
    if delta == 0:
        return measurement.near, measurement.far
    near = forward.ApertureField(
        measurement.near.positions,
        recognition.add_noise(measurement.near.samples, delta, spec.rng(*stream, 1)),
        measurement.near.k,
        measurement.near.weights,
    )
    far = recognition.noisy_far(measurement.far, delta, spec.rng(*stream, 0))
    return near, far


def measurement_path(out, shape_id, band):
    return os.path.join(out, "measurements", f"{shape_id}_{band}.json")


def cmd_simulate(cfg, out, threads=1, costs=None, delta=None):
    """Simulate both bands for every shape and write measurement files.

    Noise of level ``delta`` (default ``noise.delta`` from the config) is
    added to the written samples; the clean measurements are returned.
    """
    params = cfg.solver_params(threads)
    delta = float(cfg.noise["delta"] if delta is None else delta)
    spec = recognition.NoiseSpec(delta, cfg.noise["seed"])
    clean = {}
    for si, shape in enumerate(cfg.shape_specs()):
        for bi, band in enumerate(BANDS):
            m = simulate_clean(cfg, shape, band, params)
            if costs is not None:
                costs.add_diagnostics(f"simulate_{band}", m.diagnostics)
            clean[(shape.id, band)] = m
            near, far = corrupt(m, delta, spec, 0, si, bi)
            prov = provenance(
                cfg, shape=shape.id, band=band, k=band_k(cfg, band), placement=cfg.placement,
                delta=delta, noise_max="max Euclidean magnitude over samples",
                iterations=[d.iterations for d in m.diagnostics], far_mode=cfg.far_mode,
            )
            write_measurement(measurement_path(out, shape.id, band), near, far, prov)
    return clean


# -- location ---------------------------------------------------------------------------


def location_aperture(cfg, grid):
    ap = cfg.aperture
    if ap["kind"] == "full":
        return None
    axis = np.asarray(cfg.receivers["center"], float) - np.asarray(cfg.placement, float)
    return cap_mask(grid, axis, np.deg2rad(ap["half_angle_deg"]))


def sampling_grid(cfg):
    sp = cfg.sampling_spacing()
    return recognition.SamplingGrid(tuple(cfg.sampling_center()), (sp, sp, sp), tuple(cfg.sampling["counts"]))


def locate(cfg, far, shape=None):
    grid = sampling_grid(cfg)
    if not grid.contains(cfg.placement):
        log.warning("sampling box does not contain the configured placement")
    return recognition.locate(
        far, cfg.k_low, grid, refine=cfg.sampling["refine"],
        aperture=location_aperture(cfg, far.grid), basis=vsh_basis(far.grid),
        shape_diameter=None if shape is None else shape.diameter,
    )


LOCATION_COLUMNS = ["shape", "delta", "z1", "z2", "z3", "loc1", "loc2", "loc3", "error",
                    "indicator", "boundary", "ties", "coarse1", "coarse2", "coarse3"]


def location_row(shape_id, delta, truth, res):
    err = res.error(truth) if truth is not None else None
    t = truth if truth is not None else [None] * 3
    return [shape_id, delta, *t, *res.position, err, res.value, res.on_boundary, len(res.ties),
            *res.coarse_position]


def map_rows(res):
    pts = res.grid.points()
    return [[*p, v] for p, v in zip(pts, res.values.ravel())]


def cmd_locate(cfg, out, measurements=None, costs=None):
    """Locate every low-band measurement (default: ``out/measurements/*_low.json``)."""
    if measurements is None:
        measurements = [measurement_path(out, s.id, "low") for s in cfg.shape_specs()]
    shapes = {s.id: s for s in cfg.shape_specs()}
    rows, results = [], {}
    for path in measurements:
        near, far, prov = read_measurement(path)
        sid = prov.get("shape", os.path.basename(path))
        res = locate(cfg, far, shapes.get(sid))
        if costs is not None:
            costs.add("locate", inner_products=6 * res.evaluations)
        truth = prov.get("placement")
        rows.append(location_row(sid, prov.get("delta", 0.0), truth, res))
        write_csv(os.path.join(out, f"indicator_map_{sid}.csv"), ["x1", "x2", "x3", "indicator"], map_rows(res),
                  comments(cfg, shape=sid, k=cfg.k_low))
        results[sid] = res
    write_csv(os.path.join(out, "location.csv"), LOCATION_COLUMNS, rows, comments(cfg, k=cfg.k_low))
    return results


# -- identification ---------------------------------------------------------------------


def match_row(cfg, dictionary, near, far, z, cache=None):
    mode = cfg.dictionary["mode"]
    measurement = far if mode == "far" else near
    _, row, ties, gaps = recognition.identify(
        measurement, dictionary, z, cfg.k_high, mode=mode, cache=cache,
        tolerance=cfg.dictionary["near_tolerance"],
    )
    return row, ties, gaps


def make_cache(cfg):
    return dictmod.EntryCache(cfg.shape_specs(), cfg.grid(), contrast_settings(cfg),
                              cfg.solver_params(), polarization=cfg.sources["polarization"])


def table_files(cfg, out, table, label):
    extra = {"delta": label, "k": cfg.k_high, "mode": cfg.dictionary["mode"]}
    atomic_write_text(os.path.join(out, f"gesture_raw_delta{label}.csv"), table.to_csv("raw", comments(cfg, **extra)))
    atomic_write_text(os.path.join(out, f"gesture_normalized_delta{label}.csv"),
                      table.to_csv("normalized", comments(cfg, **extra)))


def cmd_identify(cfg, out, dictionary=None, measurements=None, positions=None, costs=None):
    """Match every high-band measurement against the dictionary.

    ``positions`` maps shape id to the located position; missing shapes
    are located from ``out/location.csv`` or, failing that, from the
    low-band measurement file.
    """
    if dictionary is None and not cfg.dictionary["on_demand"]:
        f = cfg.dictionary["file"]
        if f is None:
            f = os.path.join(out, "dictionary.emgd")
        elif not os.path.isabs(f):
            f = os.path.join(cfg.base_dir, f)
        dictionary = dictmod.load(f)
    cache = make_cache(cfg) if cfg.dictionary["on_demand"] else None
    if measurements is None:
        measurements = [measurement_path(out, s.id, "high") for s in cfg.shape_specs()]
    positions = dict(positions or {})
    loc_csv = os.path.join(out, "location.csv")
    if os.path.exists(loc_csv):
        from .io import read_csv

        _, cols, rows = read_csv(loc_csv)
        for r in rows:
            positions.setdefault(r[0], np.array([float(r[cols.index(c)]) for c in ("loc1", "loc2", "loc3")]))
    row_ids, raw, delta = [], [], None
    columns = dictionary.shape_ids() if dictionary is not None else sorted(cache.shapes)
    for path in measurements:
        near, far, prov = read_measurement(path)
        sid = prov.get("shape", os.path.basename(path))
        delta = prov.get("delta", 0.0)
        if sid not in positions:
            low = path.replace("_high.json", "_low.json")
            _, lfar, _ = read_measurement(low)
            positions[sid] = locate(cfg, lfar).position
        row, _, _ = match_row(cfg, dictionary, near, far, positions[sid], cache)
        if costs is not None:
            costs.add("identify", inner_products=3 * len(row))
        row_ids.append(sid)
        raw.append([row[c] for c in columns])
    table = recognition.MatchTable(row_ids, columns, raw, {"k": cfg.k_high})
    table_files(cfg, out, table, delta_label(delta or 0.0))
    return table


# -- full experiment --------------------------------------------------------------------


SWEEP_COLUMNS = ["delta", "mean_location_error", "max_location_error", "identified", "rows",
                 "min_margin", "ties"]


def cmd_experiment(cfg, out, threads=1, echo=print):
    """Dictionary, simulation, location and identification with a noise sweep.

    Returns a summary dict (also written to ``summary.json``).
    """
    os.makedirs(out, exist_ok=True)
    timer = Timer()
    costs = CostSummary()
    atomic_write_text(os.path.join(out, "config.yaml"), f"# config_hash: {cfg.hash()}\n" + cfg.to_yaml())

    with timer("dictionary"):
        dictionary = obtain_dictionary(cfg, out, threads, costs) if not cfg.dictionary["on_demand"] else None
    cache = make_cache(cfg) if cfg.dictionary["on_demand"] else None

    with timer("simulate"):
        clean = cmd_simulate(cfg, out, threads, costs, delta=0.0)

    shapes = cfg.shape_specs()
    truth = np.asarray(cfg.placement, float)
    levels = list(cfg.noise["levels"])
    loc_rows, sweep_rows, tables, locations = [], [], {}, {}
    for li, delta in enumerate(levels):
        spec = recognition.NoiseSpec(delta, cfg.noise["seed"])
        row_ids, raw = [], []
        errors = []
        for si, shape in enumerate(shapes):
            _, far_low = corrupt(clean[(shape.id, "low")], delta, spec, 1 + li, si, 0)
            with timer("locate"):
                res = locate(cfg, far_low, shape)
            costs.add("locate", inner_products=6 * res.evaluations)
            locations[(shape.id, delta)] = res
            loc_rows.append(location_row(shape.id, delta, list(truth), res))
            errors.append(res.error(truth))
            near_hi, far_hi = corrupt(clean[(shape.id, "high")], delta, spec, 1 + li, si, 1)
            with timer("identify"):
                row, _, _ = match_row(cfg, dictionary, near_hi, far_hi, res.position, cache)
            costs.add("identify", inner_products=3 * len(row))
            row_ids.append(shape.id)
            raw.append(row)
        columns = sorted(raw[0])
        table = recognition.MatchTable(row_ids, columns, [[r[c] for c in columns] for r in raw],
                                       {"k": cfg.k_high})
        tables[delta] = table
        table_files(cfg, out, table, delta_label(delta))
        margins = table.margins()
        sweep_rows.append([delta, float(np.mean(errors)), float(np.max(errors)), sum(table.correct()),
                           len(row_ids), min(margins.values()) if margins else None, len(table.ties())])

    write_csv(os.path.join(out, "location.csv"), LOCATION_COLUMNS, loc_rows, comments(cfg, k=cfg.k_low))
    for shape in shapes:
        res = locations[(shape.id, levels[0])]
        write_csv(os.path.join(out, f"indicator_map_{shape.id}.csv"), ["x1", "x2", "x3", "indicator"],
                  map_rows(res), comments(cfg, shape=shape.id, k=cfg.k_low, delta=levels[0]))
    write_csv(os.path.join(out, "noise_sweep.csv"), SWEEP_COLUMNS, sweep_rows, comments(cfg))
    write_csv(os.path.join(out, "cost_summary.csv"), ["stage", "solves", "matvecs", "inner_products"],
              costs.rows(), comments(cfg))

    from . import plots

    with timer("figures"):
        plots.render_all(out, shapes, locations, tables, sweep_rows, levels, truth,
                         meta={"config_hash": cfg.hash()})

    summary = {
        "config_hash": cfg.hash(),
        "shapes": [s.id for s in shapes],
        "k_low": cfg.k_low,
        "k_high": cfg.k_high,
        "levels": levels,
        "location_errors": {f"{s.id}@{d:g}": locations[(s.id, d)].error(truth) for d in levels for s in shapes},
        "identified": {format(d, "g"): tables[d].identified() for d in levels},
        "margins": {format(d, "g"): tables[d].margins() for d in levels},
        "boundary": any(r.on_boundary for r in locations.values()),
        "ties": any(t.ties() for t in tables.values()) or any(r.tied for r in locations.values()),
        "all_correct": all(all(t.correct()) for t in tables.values()),
    }
    atomic_write_text(os.path.join(out, "summary.json"), json.dumps(summary, sort_keys=True, indent=1) + "\n")

    total = sum(timer.spans.values())
    echo("timing (s): " + ", ".join(f"{k} {v:.2f}" for k, v in timer.spans.items()) + f", total {total:.2f}")
    if total > 0:
        echo(f"stage-2 matching share of runtime: {100 * timer.spans.get('identify', 0.0) / total:.3f}%")
    summary["timing"] = dict(timer.spans)
    return summary

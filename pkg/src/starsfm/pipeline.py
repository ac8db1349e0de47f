"""End-to-end orchestration: view graph, local stars, overlap, averaging, BA.

Inputs come either from the synthetic oracle (in memory) or from an
ingestion directory written by ``synth``::

    scores.json            candidate similarity scores
    star_<l>/              one local reconstruction per star
    keypoints.json         per-image keypoints (optional)
    classical_tracks.json  classical tracks (optional)
    cameras.json           image -> physical camera map (optional)
    truth.json             ground-truth reconstruction (optional)
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .averaging import (
    RotationAveraging,
    SimilarityAveraging,
    average_intrinsics,
    spanning_tree_centers,
    star_measurements,
)
from .bundle import BAReport, BundleAdjuster, build_problem
from .evaluation import AUC_THRESHOLDS, EvalReport, evaluate
from .geometry import Pose
from .overlap import compute_overlaps, filter_edges, pair_weights
from .reconstruction import GlobalReconstruction, LocalStarReconstruction, load_star_bundles, load_tracks, save_star, save_tracks
from .synthetic import NoiseModel, SceneConfig, classical_tracks, generate_scene, simulate_local_star, simulate_scores, synthesize_keypoints
from .tracks import generate_virtual_tracks, mix_tracks, snap_and_merge
from .viewgraph import CandidateScores, UnionFind, ViewGraph, ViewGraphBuilder, decompose_stars, graph_stats


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    # view graph
    delta0: float = 0.8
    delta_step: float = 0.1
    delta_floor: float = 0.2
    neighbor_cap: int = 25
    # tracks
    beta: float = 1.0
    pair_budget: int = 512
    virtual_samples: int = 100
    virtual_global_ratio: float = 0.1
    # overlap
    tau: float = 3.0
    overlap_stride: int = 4
    min_overlap: float = 0.05
    registration_min_overlap: float = 0.05
    # averaging
    rotation_huber: float = 0.1
    rotation_max_iter: int = 200
    rotation_tol: float = 1e-10
    similarity_loss: str = "huber"
    similarity_huber_factor: float = 0.01
    similarity_max_iter: int = 200
    similarity_tol: float = 1e-12
    similarity_variant: bool = False
    # bundle adjustment
    huber_px: float = 1.0
    arctan_px: float = 4.0
    ba_max_iter: int = 100
    ba_function_tol: float = 1e-12
    ba_gradient_tol: float = 1e-12
    ba_initial_damping: float = 1e-4
    refine_focals: bool = True
    # run control
    auc_thresholds: tuple = AUC_THRESHOLDS
    seed: int = 0
    workers: int = 1
    skip_tracking: bool = False
    skip_aba: bool = False
    use_classical: bool = True
    use_virtual: bool = True
    report_timings: bool = True

    def __post_init__(self):
        object.__setattr__(self, "auc_thresholds", tuple(self.auc_thresholds))
        if not (0 < self.delta_floor <= self.delta0 <= 1) or not self.delta_step > 0:
            raise ConfigError("need 0 < delta_floor <= delta0 <= 1 and delta_step > 0")
        if self.neighbor_cap < 1 or self.pair_budget < 1 or self.virtual_samples < 1:
            raise ConfigError("neighbor_cap, pair_budget and virtual_samples must be positive")
        for name in ("beta", "tau", "huber_px", "arctan_px", "rotation_huber"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("virtual_global_ratio", "min_overlap", "registration_min_overlap"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.similarity_loss not in ("huber", "trivial"):
            raise ConfigError("similarity_loss must be 'huber' or 'trivial'")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        return _build(cls, d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class SyntheticSpec:
    """Scene, noise and track settings for the oracle path."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    classical_fraction: float = 0.25

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        d = dict(d)
        unknown = sorted(set(d) - {"scene", "noise", "classical_fraction"})
        if unknown:
            raise ConfigError(f"unknown synthetic keys: {unknown}")
        scene = dict(d.get("scene", {}))
        if "doppelganger_band" in scene:
            scene["doppelganger_band"] = tuple(scene["doppelganger_band"])
        noise = dict(d.get("noise", {}))
        if "scale_range" in noise:
            noise["scale_range"] = tuple(noise["scale_range"])
        return cls(_build(SceneConfig, scene), _build(NoiseModel, noise), float(d.get("classical_fraction", 0.25)))

    def to_dict(self) -> dict:
        return {
            "scene": dataclasses.asdict(self.scene),
            "noise": dataclasses.asdict(self.noise),
            "classical_fraction": self.classical_fraction,
        }


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key=value`` overrides; dotted keys address nested sections."""
    out = json.loads(json.dumps(raw))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} does not address a section")
        node[parts[-1]] = _parse_value(value)
    return out


def load_config(path=None, overrides=None, seed=None):
    """Read ``{"pipeline": {...}, "synthetic": {...}}`` plus overrides.

    Top-level keys other than the two sections are read as pipeline keys;
    ``synthetic.*`` keys address the synthetic spec.
    """
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    raw = apply_overrides(raw, overrides)
    synthetic = raw.pop("synthetic", {})
    pipe = raw.pop("pipeline", {})
    pipe.update(raw)
    if seed is not None:
        pipe["seed"] = seed
    return PipelineConfig.from_dict(pipe), SyntheticSpec.from_dict(synthetic)


# -- inputs ---------------------------------------------------------------------


@dataclass
class PipelineInputs:
    scores: CandidateScores
    stars: list[LocalStarReconstruction] | None = None
    keypoints: dict | None = None
    classical: list | None = None
    camera_of: dict | None = None
    truth: GlobalReconstruction | None = None
    scene: object | None = None
    spec: SyntheticSpec | None = None


def keypoints_to_json(keypoints) -> dict:
    return {str(i): {"ids": np.asarray(ids).tolist(), "uv": np.asarray(uv).tolist()}
            for i, (ids, uv) in sorted(keypoints.items())}


def keypoints_from_json(d) -> dict:
    return {int(i): (np.array(v["ids"], dtype=int), np.array(v["uv"], dtype=float).reshape(-1, 2))
            for i, v in d.items()}


def _roundtrip(recon: GlobalReconstruction) -> GlobalReconstruction:
    return GlobalReconstruction.from_json(json.loads(json.dumps(recon.to_json())))


def synthetic_inputs(spec: SyntheticSpec, seed: int = 0) -> PipelineInputs:
    """Oracle inputs; stars are simulated once the view graph is known."""
    scene = generate_scene(spec.scene)
    scores = CandidateScores.from_json(simulate_scores(scene).to_json())
    kp = keypoints_from_json(keypoints_to_json(synthesize_keypoints(scene, spec.noise, seed)))
    classical = classical_tracks(scene, kp, spec.classical_fraction, seed)
    return PipelineInputs(
        scores, None, kp, classical, dict(enumerate(scene.camera_of)), scene.truth(), scene, spec
    )


def simulate_stars(scene, star_graphs, noise: NoiseModel, seed: int, canonical: bool = True):
    """Oracle stars; ``canonical`` gives them on-disk precision so the
    in-memory path matches a write/read round trip of the raw stars."""
    stars = [simulate_local_star(scene, s, noise, seed) for s in star_graphs]
    return [s.canonical() for s in stars] if canonical else stars


def write_inputs(root, inputs: PipelineInputs, stars) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "scores.json").write_text(json.dumps(inputs.scores.to_json()))
    for s in stars:
        save_star(root, s)
    if inputs.keypoints is not None:
        (root / "keypoints.json").write_text(json.dumps(keypoints_to_json(inputs.keypoints)))
    if inputs.classical is not None:
        save_tracks(root / "classical_tracks.json", inputs.classical)
    if inputs.camera_of is not None:
        (root / "cameras.json").write_text(json.dumps({str(k): v for k, v in sorted(inputs.camera_of.items())}))
    if inputs.truth is not None:
        inputs.truth.save(root / "truth.json")
    return root


def read_inputs(root) -> PipelineInputs:
    root = Path(root)
    if not (root / "scores.json").exists():
        raise FileNotFoundError(f"{root}: missing scores.json")
    scores = CandidateScores.from_json(json.loads((root / "scores.json").read_text()))
    stars = load_star_bundles(root)
    kp = keypoints_from_json(json.loads((root / "keypoints.json").read_text())) if (root / "keypoints.json").exists() else None
    classical = load_tracks(root / "classical_tracks.json") if (root / "classical_tracks.json").exists() else None
    camera_of = None
    if (root / "cameras.json").exists():
        camera_of = {int(k): int(v) for k, v in json.loads((root / "cameras.json").read_text()).items()}
    truth = GlobalReconstruction.load(root / "truth.json") if (root / "truth.json").exists() else None
    return PipelineInputs(scores, stars, kp, classical, camera_of, truth)


# -- stages ---------------------------------------------------------------------


def registration_subset(g: ViewGraph, min_overlap: float) -> list[int]:
    """Largest component over edges whose overlap weight reaches ``min_overlap``."""
    uf = UnionFind(g.vertices)
    for e in g.edges:
        if g.overlap[e] >= min_overlap:
            uf.union(*e)
    comps: dict[int, list[int]] = {}
    for v in g.vertices:
        comps.setdefault(uf.find(v), []).append(v)
    return sorted(max(comps.values(), key=lambda c: (len(c), -min(c))))


def _recon_from(rotations, centers, stars, focals, camera_of, scales=None) -> GlobalReconstruction:
    poses = {i: Pose.from_center(rotations[i], centers[i]) for i in sorted(centers)}
    base = {}
    for s in stars:
        for m in s.members:
            base.setdefault(m, s.cameras[m])
    cameras = {i: base[i].with_focal(focals[camera_of.get(i, i)]) for i in poses}
    return GlobalReconstruction(poses, cameras, {i: camera_of.get(i, i) for i in poses}, dict(scales or {}))


@dataclass
class PipelineResult:
    graph: ViewGraph
    filtered_graph: ViewGraph
    registered: list[int]
    stars: list[LocalStarReconstruction]
    tree: GlobalReconstruction
    averaging: GlobalReconstruction
    final: GlobalReconstruction
    ba_report: BAReport | None
    reports: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    n_tracks: dict = field(default_factory=dict)

    @property
    def report(self) -> EvalReport | None:
        return self.reports.get("final")


class _Timer:
    def __init__(self):
        self.timings = {}

    def run(self, stage, fn, *args, **kwargs):
        t = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:  # tag and propagate
            raise StageError(stage, exc) from exc
        finally:
            self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - t


def _stage_viewgraph(cfg, inputs):
    return ViewGraphBuilder(cfg.delta0, cfg.delta_step, cfg.delta_floor).fit(inputs.scores).graph_


def _stage_local(cfg, inputs, graph):
    if inputs.stars is not None:
        keep = set(graph.vertices)
        stars = [s for s in inputs.stars if s.star in keep]
        if not stars:
            raise ValueError("no ingested star is centered on a view-graph vertex")
        return stars
    if inputs.scene is None:
        raise ValueError("no local reconstructions and no synthetic scene")
    spec = inputs.spec or SyntheticSpec()
    return simulate_stars(inputs.scene, decompose_stars(graph, cfg.neighbor_cap), spec.noise, cfg.seed)


def _stage_averaging(cfg, stars, weights, edges, registered, camera_of):
    reg = set(registered)
    ms = [m for s in stars for m in star_measurements(s, weights, edges, reg)]
    ms = [m for m in ms if m.weight >= cfg.registration_min_overlap and m.weight > 0]
    if not ms:
        raise ValueError("no usable relative measurements")
    focals = average_intrinsics([s for s in stars], camera_of)
    ra = RotationAveraging(cfg.rotation_huber, cfg.rotation_max_iter, cfg.rotation_tol).fit(ms)
    sa = SimilarityAveraging(cfg.similarity_loss, cfg.similarity_huber_factor, cfg.similarity_max_iter,
                             cfg.similarity_tol, cfg.similarity_variant).fit(ra.rotations_, ms)
    tree_c, tree_s = spanning_tree_centers(ra.init_rotations_, ms)
    scales = {l: s.scale for l, s in sa.scales_.items()}
    tree = _recon_from(ra.init_rotations_, tree_c, stars, focals, camera_of, tree_s)
    avg = _recon_from(ra.rotations_, sa.centers_, stars, focals, camera_of, scales)
    return tree, avg


def _star_weights(overlaps) -> dict:
    out = {}
    for res in overlaps:
        a = res.members.index(res.star)
        for b, m in enumerate(res.members):
            out[(res.star, m)] = float(min(res.transitive[a, b], res.transitive[b, a]))
    return out


def _stage_tracks(cfg, inputs, stars, overlaps, avg: GlobalReconstruction):
    reg = set(avg.poses)
    virtual = []
    if cfg.use_virtual:
        for s in stars:
            if s.star not in reg or s.star not in avg.scales:
                continue
            rng = np.random.default_rng([cfg.seed, s.star, 17])
            virtual += generate_virtual_tracks(
                s, avg.poses, avg.cameras, avg.scales[s.star], cfg.virtual_samples,
                cfg.virtual_global_ratio, rng,
            )
    feedforward, classical = [], []
    if not cfg.skip_tracking:
        raw = [t for s in stars if s.star in reg for t in s.tracks]
        feedforward = snap_and_merge(raw, inputs.keypoints or {}, cfg.beta, _star_weights(overlaps)) if raw else []
        if cfg.use_classical and inputs.classical:
            classical = list(inputs.classical)
    mixed, _ = mix_tracks(classical, feedforward, virtual, cfg.pair_budget)
    counts = {"classical": len(classical), "feedforward": len(feedforward), "virtual": len(virtual),
              "mixed": len(mixed)}
    return mixed, counts


def _stage_ba(cfg, avg, tracks):
    problem = build_problem(avg, tracks)
    ba = BundleAdjuster(cfg.huber_px, cfg.arctan_px, cfg.ba_max_iter, cfg.ba_function_tol,
                        cfg.ba_gradient_tol, 1e-16, cfg.ba_initial_damping, cfg.refine_focals,
                        cfg.workers).fit(problem)
    return ba.reconstruction_, ba.report_


def run_pipeline(config: PipelineConfig, inputs: PipelineInputs, out_dir=None) -> PipelineResult:
    """Run every stage; failures are re-raised as :class:`StageError`."""
    cfg = config
    timer = _Timer()
    graph = timer.run("viewgraph", _stage_viewgraph, cfg, inputs)
    stars = timer.run("local", _stage_local, cfg, inputs, graph)
    overlaps = timer.run("overlap", compute_overlaps, stars, cfg.tau, cfg.overlap_stride, cfg.workers)
    filtered = timer.run("overlap", filter_edges, graph, overlaps, cfg.min_overlap)
    registered = registration_subset(filtered, cfg.registration_min_overlap)
    weights = pair_weights(overlaps)
    camera_of = dict(inputs.camera_of or {})
    tree, avg = timer.run("averaging", _stage_averaging, cfg, stars, weights, set(filtered.edges),
                          registered, camera_of)
    ba_report = None
    counts = {}
    final = avg
    if not cfg.skip_aba:
        tracks, counts = timer.run("tracks", _stage_tracks, cfg, inputs, stars, overlaps, avg)
        final, ba_report = timer.run("ba", _stage_ba, cfg, avg, tracks)
    result = PipelineResult(graph, filtered, registered, stars, tree, avg, final, ba_report,
                            timings=dict(timer.timings), n_tracks=counts)
    if inputs.truth is not None:
        # the oracle evaluates against the truth as it would read back from disk
        truth = _roundtrip(inputs.truth) if inputs.scene is not None else inputs.truth
        stats = graph_stats(filtered.subgraph(registered))
        timings = {k: round(v, 6) for k, v in timer.timings.items()} if cfg.report_timings else None
        for name, recon in (("tree", tree), ("averaging", avg), ("final", final)):
            result.reports[name] = timer.run(
                "eval", evaluate, recon, truth, cfg.auc_thresholds, stats,
                timings if name == "final" else None,
            )
    if out_dir is not None:
        write_outputs(out_dir, cfg, result)
    return result


def write_outputs(out_dir, cfg: PipelineConfig, result: PipelineResult) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    result.filtered_graph.save(out / "viewgraph.json")
    result.tree.save(out / "reconstruction_tree.json")
    result.averaging.save(out / "reconstruction_averaging.json")
    result.final.save(out / "reconstruction.json")
    if result.ba_report is not None:
        result.ba_report.save(out / "ba_report.json")
    for name, rep in result.reports.items():
        rep.save(out / ("report.json" if name == "final" else f"report_{name}.json"))
    return out


class GlobalSfM(BaseEstimator):
    """Estimator wrapper around :func:`run_pipeline`.

    ``fit(inputs)`` stores ``result_``; ``transform`` returns the final
    reconstruction.
    """

    def __init__(self, config: PipelineConfig | None = None):
        self.config = config

    def fit(self, inputs: PipelineInputs, y=None):
        self.result_ = run_pipeline(self.config or PipelineConfig(), inputs)
        return self

    def transform(self, X=None):
        from ._validation import check_fitted

        check_fitted(self, "result_")
        return self.result_.final

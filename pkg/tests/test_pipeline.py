import json

import numpy as np
import pytest

from starsfm.pipeline import (
    ConfigError,
    GlobalSfM,
    PipelineConfig,
    PipelineInputs,
    StageError,
    SyntheticSpec,
    apply_overrides,
    decompose_stars,
    load_config,
    read_inputs,
    registration_subset,
    run_pipeline,
    simulate_stars,
    synthetic_inputs,
    write_inputs,
)
from starsfm.synthetic import NoiseModel, SceneConfig
from starsfm.viewgraph import ViewGraph, ViewGraphBuilder

SMALL = SyntheticSpec(SceneConfig(n_cameras=12, seed=0), NoiseModel())
NOISY = SyntheticSpec(SceneConfig(n_cameras=12, seed=1),
                      NoiseModel(rotation_deg=0.5, center_frac=0.005, depth_rel=0.005, scale_range=(0.7, 1.4),
                                 track_px=0.3))
QUIET = PipelineConfig(report_timings=False)


def recon_json(recon):
    return json.dumps(recon.to_json(), sort_keys=True)


class TestConfig:
    def test_defaults(self):
        c = PipelineConfig()
        assert (c.delta0, c.delta_step, c.delta_floor) == (0.8, 0.1, 0.2)
        assert (c.tau, c.beta, c.pair_budget) == (3.0, 1.0, 512)
        assert (c.virtual_samples, c.virtual_global_ratio, c.neighbor_cap) == (100, 0.1, 25)
        assert c.auc_thresholds == (1, 3, 5, 10, 20, 30)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"delta_zero": 0.8})
        with pytest.raises(ConfigError):
            SyntheticSpec.from_dict({"scene": {"cameras": 3}})

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig(tau=0.0)
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"delta0": 0.1})

    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"pipeline": {"tau": 2.0}, "synthetic": {"scene": {"n_cameras": 9}}}))
        cfg, spec = load_config(path, ["beta=0.5", "synthetic.noise.rotation_deg=1.5"], seed=4)
        assert (cfg.tau, cfg.beta, cfg.seed) == (2.0, 0.5, 4)
        assert spec.scene.n_cameras == 9 and spec.noise.rotation_deg == 1.5

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["novalue"])

    def test_roundtrip(self):
        c = PipelineConfig(tau=2.5, skip_aba=True)
        assert PipelineConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


class TestPipeline:
    def test_noiseless_loop(self):
        spec = SyntheticSpec(SceneConfig(n_cameras=30, seed=0), NoiseModel())
        res = run_pipeline(QUIET, synthetic_inputs(spec, 0))
        assert len(res.registered) == 30
        for name in ("averaging", "final"):
            assert res.reports[name].auc["1"] >= 99.9

    def test_skip_aba_returns_averaging(self):
        res = run_pipeline(PipelineConfig(skip_aba=True), synthetic_inputs(NOISY, 0))
        assert res.final is res.averaging and res.ba_report is None
        full = run_pipeline(QUIET, synthetic_inputs(NOISY, 0))
        assert recon_json(full.averaging) == recon_json(res.final)

    def test_deterministic(self, tmp_path):
        a = run_pipeline(QUIET, synthetic_inputs(NOISY, 3), tmp_path / "a")
        b = run_pipeline(QUIET, synthetic_inputs(NOISY, 3), tmp_path / "b")
        for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
        assert a.ba_report.cost_history == b.ba_report.cost_history

    def test_ingestion_matches_oracle(self, tmp_path):
        inputs = synthetic_inputs(NOISY, 0)
        graph = ViewGraphBuilder().fit(inputs.scores).graph_
        stars = simulate_stars(inputs.scene, decompose_stars(graph), NOISY.noise, 0, canonical=False)
        write_inputs(tmp_path, inputs, stars)
        disk = run_pipeline(QUIET, read_inputs(tmp_path))
        memory = run_pipeline(QUIET, inputs)
        assert recon_json(disk.averaging) == recon_json(memory.averaging)
        assert recon_json(disk.final) == recon_json(memory.final)
        assert disk.reports["final"].to_json() == memory.reports["final"].to_json()

    def test_noisy_stages_improve(self):
        res = run_pipeline(QUIET, synthetic_inputs(NOISY, 0))
        assert res.reports["final"].auc["3"] >= res.reports["averaging"].auc["3"]
        assert set(res.n_tracks) == {"classical", "feedforward", "virtual", "mixed"}

    def test_stage_errors_are_tagged(self):
        inputs = synthetic_inputs(SMALL, 0)
        bare = PipelineInputs(inputs.scores)
        with pytest.raises(StageError) as err:
            run_pipeline(QUIET, bare)
        assert err.value.stage == "local"

    def test_timings_reported(self):
        res = run_pipeline(PipelineConfig(), synthetic_inputs(SMALL, 0))
        assert {"viewgraph", "local", "overlap", "averaging", "tracks", "ba"} <= set(res.timings)
        assert "timings" in res.reports["final"].to_json()
        assert "timings" not in res.reports["averaging"].to_json()

    def test_estimator(self):
        est = GlobalSfM(QUIET)
        assert est.get_params()["config"] is QUIET
        recon = est.fit(synthetic_inputs(SMALL, 0)).transform()
        assert sorted(recon.poses) == list(range(12))


class TestRegistrationSubset:
    def test_low_overlap_edges_do_not_join(self):
        g = ViewGraph(list(range(5)))
        for e, o in (((0, 1), 0.5), ((1, 2), 0.5), ((2, 3), 0.01), ((3, 4), 0.5)):
            g.add_edge(*e)
            g.overlap[e] = o
        assert registration_subset(g, 0.05) == [0, 1, 2]
        assert registration_subset(g, 0.0) == [0, 1, 2, 3, 4]

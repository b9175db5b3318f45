import json

import pytest
import torch

from shotcast.harness.bench import BenchResult, run_bench, write_outputs
from shotcast.harness.checks import run_checks
from shotcast.harness.config import ConfigError, RunConfig
from shotcast.harness.latent_io import load_latents, save_latents
from shotcast.harness.metrics import chunk_jumps, recall_error, shotcut_proxy
from shotcast.harness.scenario import EntityRecord, ScenarioSpec, entity_bank, gen_scenario
from shotcast.harness.training import TrainConfig, train_tf
from shotcast.memory import RouterConfig
from shotcast.model import ModelConfig, VelocityTransformer
from shotcast.stream import LatentChunk, ShotSchedule

SMALL = ScenarioSpec(channels=2, grid_h=2, grid_w=2, L=2, shot_chunks=(2, 1, 1, 2), entity_size=1, atoms=4,
                     entity_bank=3)


# scenarios

def test_scenario_is_deterministic():
    a, b = gen_scenario(SMALL, 7), gen_scenario(SMALL, 7)
    assert torch.equal(a.frames, b.frames) and a.schedule.boundaries == b.schedule.boundaries
    assert not torch.equal(a.frames, gen_scenario(SMALL, 8).frames)


def test_scenario_layout_and_entity_gap():
    spec = ScenarioSpec()
    sc = gen_scenario(spec, 0)
    assert sc.frames.shape == (spec.total_frames, 4, 4, 4)
    assert sc.schedule.boundaries == (12, 15, 18, 21)
    rec = sc.records[0]
    assert rec.shots == [1, 5]
    shots = {sc.schedule.shot_of_frame(f) for f in rec.frames}
    assert shots == {1, 5}  # absent for three whole shots in between
    for f in rec.frames:
        assert torch.equal(rec.region(sc.frames[f]), rec.patch)
    assert sc.schedule.cues == (1.0, 0.0, 0.0, 0.0, 1.0)


def test_entities_come_from_the_bank():
    bank = entity_bank(SMALL)
    for s in range(5):
        rec = gen_scenario(SMALL, s).records[0]
        assert any(torch.equal(rec.patch, p) and (rec.top, rec.left) == (t, l) for p, t, l in bank)


def test_single_shot_without_entities():
    spec = ScenarioSpec(shot_chunks=(3,), entities=0)
    sc = gen_scenario(spec, 1)
    assert sc.records == [] and sc.schedule.num_shots == 1
    with pytest.raises(ValueError):
        ScenarioSpec(shot_chunks=(3,))


def test_generated_cuts_are_detectable():
    for s in range(5):
        sc = gen_scenario(ScenarioSpec(), s)
        assert shotcut_proxy(sc.frames, sc.schedule) == 1.0


# metrics

def test_recall_error_examples():
    patch = torch.ones(2, 1, 1)
    rec = EntityRecord(patch, 0, 1, frames=[0, 1], shots=[1])
    frames = torch.zeros(2, 2, 2, 2)
    frames[:, :, 0, 1] = 1.0
    assert recall_error(LatentChunk(frames, 1), rec) == 0.0
    frames[:, :, 0, 1] = 0.0
    assert recall_error(LatentChunk(frames, 1), rec) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        recall_error(LatentChunk(frames, 2), rec)


def test_recall_error_matches_loop_norm():
    g = torch.Generator().manual_seed(0)
    patch = torch.randn(2, 2, 2, generator=g)
    frames = torch.randn(3, 2, 4, 4, generator=g)
    rec = EntityRecord(patch, 1, 2, frames=[3, 5], shots=[2])
    chunk = LatentChunk(frames, 2)  # frames 3..5
    num = den = 0.0
    for f in (0, 2):
        for c in range(2):
            for y in range(2):
                for x in range(2):
                    num += (float(frames[f, c, 1 + y, 2 + x]) - float(patch[c, y, x])) ** 2
                    den += float(patch[c, y, x]) ** 2
    assert recall_error(chunk, rec) == pytest.approx((num / den) ** 0.5, rel=1e-6)


def test_shotcut_proxy_examples():
    sched = ShotSchedule.from_seeds(1, [3], [0, 1])
    frames = torch.zeros(6, 1, 1, 1)
    frames[3:] = 5.0
    frames[:3, 0, 0, 0] = torch.tensor([0.0, 0.1, 0.2])
    assert shotcut_proxy(frames, sched) == 1.0
    assert shotcut_proxy(torch.zeros(6, 1, 1, 1), sched) == 0.0
    with pytest.raises(ValueError):
        shotcut_proxy(frames, ShotSchedule.from_seeds(1, [], [0]))
    jumps, is_cut = chunk_jumps(frames, sched)
    assert is_cut.tolist() == [False, False, True, False, False]


# storage and config

def test_latent_roundtrip(tmp_path):
    x = torch.randn(3, 2, 4, 4)
    p = save_latents(tmp_path / "a", x, note=1)
    assert p.suffix == ".bin" and p.stat().st_size == x.numel() * 4
    back, meta = load_latents(tmp_path / "a.bin")
    assert torch.equal(back, x) and meta["note"] == 1 and meta["shape"] == [3, 2, 4, 4]
    (tmp_path / "a.json").write_text(json.dumps({"shape": [5], "dtype": "<f4"}))
    with pytest.raises(ValueError):
        load_latents(tmp_path / "a")


def test_config_roundtrip_and_validation(tmp_path):
    cfg = RunConfig()
    back = RunConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert RunConfig.from_dict({"scenario": {"channels": 2}}).model.channels == 2
    for bad in ({"wat": 1}, {"model": {"layers": 2, "nope": 0}}, {"W": 20},
                {"model": {"channels": 3}}, {"policy": "random"}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


# training and bench plumbing

def test_training_reduces_loss():
    model = VelocityTransformer(ModelConfig(channels=2, grid_h=2, grid_w=2, layers=1, heads=2, head_dim=8))
    losses = train_tf(model, SMALL, RouterConfig(W=1, k=1), TrainConfig(iters=120, dense_iters=0, log_every=1000))
    assert len(losses) == 120
    assert sum(losses[-20:]) / 20 < sum(losses[:20]) / 20


def test_bench_plumbing(tmp_path):
    cfg = RunConfig.from_dict({"scenario": {"channels": 2, "grid_h": 2, "grid_w": 2, "L": 2,
                                            "shot_chunks": [2, 1, 1, 2], "entity_size": 1, "atoms": 4},
                               "model": {"channels": 2, "grid_h": 2, "grid_w": 2, "layers": 1, "heads": 2,
                                         "head_dim": 8},
                               "train": {"iters": 5}, "W": 1, "k": 1, "sample_steps": 2,
                               "seeds": [0], "eval_scenarios": 2})
    res = run_bench(cfg, ("no-memory", "camr"))
    assert set(res.errors) == {"no-memory", "camr"} and all(len(v) == 1 for v in res.errors.values())
    paths = write_outputs(res, tmp_path)
    assert all(p.exists() for p in paths.values())
    doc = json.loads(paths["json"].read_text())
    assert doc["camr_gain_vs_no_memory"] == pytest.approx(res.camr_gain())
    assert paths["tsv"].read_text().splitlines()[0] == "variant\tseed\trecall_error"
    with pytest.raises(ValueError):
        run_bench(cfg, ("dense",))


def test_bench_result_ordering():
    r = BenchResult(["no-memory", "sink", "camr"], [0], {"no-memory": [1.0], "sink": [0.9], "camr": [0.8]})
    assert r.ordering_holds() and r.camr_gain() == pytest.approx(0.2)
    r.errors["sink"] = [0.7]
    assert not r.ordering_holds()
    assert "ordering camr < sink < no-memory: no" in r.table()


def test_quick_invariants_pass():
    results = run_checks(quick=True)
    assert len(results) == 8
    assert all(r.ok for r in results), [r.line() for r in results if not r.ok]

import json
import math

import numpy as np
import pytest

from eeoffload import data
from eeoffload.classifier import DistortionClassifier, build_network
from eeoffload.distortion import Kind
from eeoffload.harness import metrics, recount, sweep
from eeoffload.harness.config import ConfigError, ExperimentConfig, format_config, load_config, parse_config
from eeoffload.model import BranchRecord, EarlyExitModel, ExitTaken, InferenceResult
from eeoffload.runtime.services import Mode


def res(cls, exit_id, taken=ExitTaken.SIDE, offloaded=False):
    return InferenceResult(cls, 0.9, taken, exit_id, (BranchRecord(exit_id, cls, 0.9),), offloaded)


# --- metrics -----------------------------------------------------------------------

def test_overall_accuracy():
    rs = [res(0, 1), res(1, 4, ExitTaken.FINAL, True), res(2, 2), res(0, 3, ExitTaken.FALLBACK, True)]
    assert metrics.overall_accuracy(rs, [0, 1, 2, 0]) == 1.0
    assert metrics.overall_accuracy(rs, [0, 1, 1, 1]) == 0.5
    with pytest.raises(ValueError):
        metrics.overall_accuracy([], [])
    with pytest.raises(ValueError):
        metrics.overall_accuracy(rs, [0])


def test_exit_point_accuracy_is_conditional():
    rs = [res(0, 3), res(1, 3), res(2, 3, ExitTaken.FALLBACK, True), res(1, 2)]
    assert metrics.exit_point_accuracy(rs, [0, 1, 0, 0], 1) is None
    assert metrics.exit_point_accuracy(rs, [0, 1, 0, 0], 3) == 1.0
    assert metrics.exit_point_accuracy(rs, [0, 0, 0, 0], 3) == 0.5
    assert metrics.exit_point_count(rs, 3) == 2


def test_on_device_probability():
    rs = [res(0, 1), res(0, 4, ExitTaken.FINAL, True), res(0, 2), res(0, 1)]
    assert metrics.on_device_probability(rs) == 0.75
    with pytest.raises(ValueError):
        metrics.on_device_probability([])


def test_mean_ci_hand_value_and_shrinkage():
    m, h = metrics.mean_ci([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5 and h == pytest.approx(1.96 * math.sqrt(5 / 3) / 2)
    assert metrics.mean_ci([7.0]) == (7.0, 0.0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=2000).tolist()
    _, h1 = metrics.mean_ci(x[:1000])
    _, h2 = metrics.mean_ci(x)
    assert h2 / h1 == pytest.approx(1 / math.sqrt(2), rel=0.1)
    with pytest.raises(ValueError):
        metrics.mean_ci([])


# --- config --------------------------------------------------------------------------

def test_parse_config_full(tmp_path):
    (tmp_path / "p.csv").write_text("name,throughput_bps,rtt_ms\nlab,1e8,3\n")
    cfg = parse_config("""
        # comment
        model = m.eexp
        classifier = /abs/dc.eexp   # trailing comment
        kinds = noise
        noise_levels = 0, 30, 40
        p_tar = 0.75
        profiles_file = p.csv
        profiles = lab, sa-east-1
        modes = expert, forced-noise
        limit = 50
    """, base_dir=tmp_path)
    assert cfg.model == str(tmp_path / "m.eexp") and cfg.classifier == "/abs/dc.eexp"
    assert cfg.kinds == [Kind.NOISE] and cfg.noise_levels == [0, 30, 40]
    assert cfg.cells() == [(Kind.NOISE, 0), (Kind.NOISE, 30), (Kind.NOISE, 40)]
    assert [p.name for p in cfg.profiles] == ["lab", "sa-east-1"] and cfg.profiles[0].rtt_ms == 3.0
    assert cfg.modes == [Mode.EXPERT, Mode.FORCED_NOISE] and cfg.limit == 50 and cfg.p_tar == 0.75


def test_config_defaults_and_round_trip(tmp_path):
    cfg = parse_config("model = a\nclassifier = b\n")
    assert cfg.p_tar == 0.8 and cfg.blur_levels == [0, 1, 2, 3, 4, 5]
    assert [p.name for p in cfg.profiles] == ["sa-east-1", "us-west-1", "eu-west-3"]
    (tmp_path / "c.cfg").write_text(format_config(cfg))
    again = load_config(tmp_path / "c.cfg")
    assert (again.model, again.classifier) == (str(tmp_path / "a"), str(tmp_path / "b"))
    again.model, again.classifier = cfg.model, cfg.classifier
    assert format_config(again) == format_config(cfg)


@pytest.mark.parametrize("text,match", [
    ("classifier = b", "model"),
    ("model = a\nclassifier = b\np_tar = 1.5", "p_tar"),
    ("model = a\nclassifier = b\nblur_levels = 0,6", "grid"),
    ("model = a\nclassifier = b\nnoise_levels = 5,5", "duplicates"),
    ("model = a", "classifier"),
    ("model = a\nclassifier = b\ncolour = red", "unknown config keys"),
    ("model = a\nmodel = b", "duplicate"),
    ("model = a\nclassifier = b\nprofiles = mars", "unknown profiles"),
    ("model = a\nclassifier = b\nmodes = turbo", "turbo"),
    ("model = a\nclassifier = b\nkinds = pristine", "pristine"),
    ("model = a\njust words", "key = value"),
    ("model = a\nclassifier = b\nlimit = x", "invalid literal"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


# --- sweep ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def assets():
    m = EarlyExitModel.build(3, (3, 32, 32), width=4)
    m.init_xavier(np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for b in m.branches.values():
        b.dense.bias.value[...] = rng.normal(size=3)
    net = build_network(16, 2)
    net.init_xavier(np.random.default_rng(2))
    test = data.load_dataset("shapes-v1", seed=7, classes=3, per_class=30).test
    return m.finalize(), DistortionClassifier(net), test


def small_cfg(out, **kw):
    base = dict(model="unused", classifier="unused", blur_levels=[0, 5], noise_levels=[0, 40],
                profiles=[__import__("eeoffload").runtime.netem.PRESETS[n] for n in ("sa-east-1", "eu-west-3")],
                p_tar=0.5, output=str(out))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def swept(assets, tmp_path_factory):
    model, clf, test = assets
    out = tmp_path_factory.mktemp("sweep")
    cfg = small_cfg(out)
    return cfg, sweep.run_sweep(cfg, model, clf, test)


def test_row_count_and_columns(swept):
    cfg, out = swept
    assert len(out.rows) == len(cfg.cells()) * len(cfg.profiles) * len(cfg.modes) == 16
    assert out.columns[:4] == ["kind", "level", "profile", "mode"]
    assert "exit3_accuracy" in out.columns and "exit4_n" in out.columns
    assert sweep.read_csv(out.csv_path) == out.rows


def test_recount_oracle_agrees(swept, assets):
    _, out = swept
    model = assets[0]
    again = recount.recount(out.trace_path, model.exit_ids)
    assert recount.compare(sweep.read_csv(out.csv_path), again) == []
    bad = [dict(r) for r in again]
    bad[0]["accuracy"] = "0.123456"
    assert recount.compare(out.rows, bad)


def test_trace_has_one_record_per_sample(swept, assets):
    cfg, out = swept
    lines = out.trace_path.read_text().splitlines()
    assert len(lines) == 16 * len(assets[2])
    rec = json.loads(lines[0])
    assert set(rec["latency"]) == {"classifier_ms", "edge_compute_ms", "serialize_ms", "emulated_network_ms",
                                   "cloud_compute_ms", "total_ms"}


def test_level_zero_equals_pristine_only_evaluation(swept, assets):
    model, _, test = assets
    _, out = swept
    x = data.to_network_input(test.images, 32)
    results = model.decide_batch(model.all_logits(x, Kind.PRISTINE), Kind.PRISTINE, 0.5)
    want = sweep.fmt(metrics.overall_accuracy(results, test.labels))
    for r in out.rows:
        if r["level"] == "0" and r["mode"] == "pristine-baseline":
            assert r["accuracy"] == want
            assert r["on_device"] == sweep.fmt(metrics.on_device_probability(results))


def test_classifier_cost_only_in_expert_mode(swept):
    _, out = swept
    for r in out.rows:
        assert (float(r["classifier_ms"]) > 0) == (r["mode"] == "expert")


def test_rerun_is_byte_identical(swept, assets, tmp_path):
    model, clf, test = assets
    _, first = swept
    again = sweep.run_sweep(small_cfg(tmp_path), model, clf, test)
    assert again.csv_path.read_bytes() == first.csv_path.read_bytes()
    assert again.trace_path.read_bytes() == first.trace_path.read_bytes()
    names = sorted(p.name for p in first.figures)
    assert names == sorted(p.name for p in again.figures)
    for a, b in zip(sorted(first.figures), sorted(again.figures)):
        assert a.read_bytes() == b.read_bytes()


def test_figures_written(swept):
    _, out = swept
    names = {p.name for p in out.figures}
    for kind in ("blur", "noise"):
        assert {f"fig_accuracy_{kind}.svg", f"fig_ondevice_{kind}.svg", f"fig_exit_accuracy_{kind}.svg",
                f"fig_latency_{kind}_sa-east-1.svg", f"fig_latency_{kind}_eu-west-3.svg"} <= names
    assert all(p.read_text().startswith("<?xml") for p in out.figures)


def test_sweep_errors(assets, tmp_path):
    model, clf, test = assets
    with pytest.raises(ConfigError, match="not found"):
        sweep.run_sweep(small_cfg(tmp_path, model=str(tmp_path / "missing.eexp")))
    partial = EarlyExitModel.build(3, (3, 32, 32), width=4, kinds=(Kind.PRISTINE,))
    with pytest.raises(ConfigError, match="branch sets"):
        sweep.run_sweep(small_cfg(tmp_path), partial, clf, test)


def test_sweep_from_files_via_cli(assets, tmp_path):
    from eeoffload.cli import main

    model, clf, _ = assets
    model.save(tmp_path / "m.eexp")
    clf.save(tmp_path / "dc.eexp")
    (tmp_path / "exp.cfg").write_text(
        "model = m.eexp\nclassifier = dc.eexp\nclasses = 3\nper_class = 30\nkinds = noise\n"
        "noise_levels = 0,40\nprofiles = us-west-1\nmodes = expert,pristine-baseline,forced-noise\n")
    assert main(["sweep", "--config", str(tmp_path / "exp.cfg"), "--out", str(tmp_path / "o")]) == 0
    rows = sweep.read_csv(tmp_path / "o" / "results.csv")
    assert len(rows) == 2 * 1 * 3
    assert recount.compare(rows, recount.recount(tmp_path / "o" / "trace.ndjson", model.exit_ids)) == []
    assert main(["sweep", "--config", str(tmp_path / "nope.cfg")]) == 2

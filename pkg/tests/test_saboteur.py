import io
import json

import numpy as np
import pytest

from errsim import errordb
from errsim.analyzer import analyze_pair, classify_value_domain
from errsim.classify import ENGINE_ERROR, MASKED, build_policy
from errsim.errors import ValidationError
from errsim.graph import Graph, OperatorNode, execute
from errsim.patterns import DomainAssignment
from errsim.saboteur import (
    CampaignConfig,
    PrefixCache,
    corrupt_values,
    load_records,
    plan_campaign,
    record_from_json,
    record_to_json,
    record_to_json_line,
    run_campaign,
)
from errsim.tensorio import bit_distance, float_bits


def default_db():
    return errordb.load_default_db()


def lenet_config(**overrides):
    image = np.random.default_rng(8).standard_normal((1, 28, 28)).astype(np.float32)
    base = dict(
        experiments=50,
        seed=7,
        input_sets=[{"image": image}],
        fallback_enabled=True,
        classifier={"policy": "top1"},
    )
    base.update(overrides)
    return CampaignConfig(**base).validate()


def test_corrupt_zero_single_target():
    golden = np.ones((2, 3, 3), np.float32)
    out = corrupt_values(golden, ((1, 2, 2),), (DomainAssignment("zero"),),
                         np.random.default_rng(0))
    assert out[1, 2, 2] == 0.0
    changed = np.flatnonzero(out.reshape(-1) != golden.reshape(-1))
    assert list(changed) == [17]


def test_corrupt_bitflip_sign_bit():
    golden = np.array([[1.0]], np.float32)
    out = corrupt_values(golden, ((0, 0, 0),),
                         (DomainAssignment("bitflip", bit=31),),
                         np.random.default_rng(0))
    assert out[0, 0] == np.float32(-1.0)


def test_corrupt_nan_is_quiet_nan():
    golden = np.array([[2.5]], np.float32)
    out = corrupt_values(golden, ((0, 0, 0),), (DomainAssignment("nan"),),
                         np.random.default_rng(0))
    assert float_bits(float(out[0, 0])) == 0x7FC00000


def test_corrupt_unit_offset_on_zero_differs_bitwise():
    golden = np.zeros((1, 1), np.float32)
    rng = np.random.default_rng(1)
    out = corrupt_values(golden, ((0, 0, 0),),
                         (DomainAssignment("unit_offset", delta=0.25),), rng)
    v = float(out[0, 0])
    assert -1.0 <= v <= 1.0
    assert float_bits(v) != float_bits(0.0)
    # re-analysis recovers the intended domain
    assert classify_value_domain(0.0, v) == "unit_offset"


def test_corrupt_unit_offset_resamples_identity_rounding():
    # a tiny delta rounds away against a large golden value; the engine
    # must keep resampling (or step to the adjacent float) rather than
    # leave the target unchanged
    golden = np.array([[6.0e5]], np.float32)
    rng = np.random.default_rng(2)
    out = corrupt_values(golden, ((0, 0, 0),),
                         (DomainAssignment("unit_offset", delta=1e-8),), rng)
    assert float_bits(float(out[0, 0])) != float_bits(float(golden[0, 0]))


def test_corrupt_random_defeats_other_classifiers():
    rng = np.random.default_rng(3)
    golden = np.array([[0.5]], np.float32)
    for _ in range(200):
        out = corrupt_values(golden, ((0, 0, 0),),
                             (DomainAssignment("random", value=None),), rng)
        v = float(out[0, 0])
        assert not np.isnan(v)
        assert v != 0.0
        assert abs(v - 0.5) > 1.0
        assert bit_distance(0.5, v) != 1
        assert classify_value_domain(0.5, v) == "random"


def test_corrupt_zero_on_zero_is_noop():
    # documented collision: writing +0.0 over +0.0 leaves the tensor
    # unchanged and the experiment can end up masked
    golden = np.zeros((1, 2), np.float32)
    out = corrupt_values(golden, ((0, 0, 0),), (DomainAssignment("zero"),),
                         np.random.default_rng(0))
    assert np.array_equal(out.view(np.uint32), golden.view(np.uint32))


def test_corrupt_changes_every_target_bitwise(rng):
    golden = rng.standard_normal((6, 5, 5)).astype(np.float32)  # no exact zeros
    targets = tuple((c, y, x) for c in (0, 3) for y in (1, 4) for x in (0, 2))
    domains = tuple(
        DomainAssignment(v, bit=4 if v == "bitflip" else None,
                         delta=0.5 if v == "unit_offset" else None)
        for v in ("nan", "zero", "bitflip", "unit_offset") * 2
    )
    out = corrupt_values(golden, targets, domains, rng)
    flat_g, flat_o = golden.reshape(-1), out.reshape(-1)
    cs = golden.shape
    for (c, y, x) in targets:
        i = (c * cs[1] + y) * cs[2] + x
        assert float_bits(float(flat_g[i])) != float_bits(float(flat_o[i]))


def test_plan_campaign_deterministic_and_covers_sites(lenet):
    config = lenet_config(experiments=100)
    db = default_db()
    plan_a = plan_campaign(config, lenet, db)
    plan_b = plan_campaign(config, lenet, db)
    assert plan_a == plan_b
    assert len(plan_a) == 100
    counts = {}
    for p in plan_a:
        counts[p.site] = counts.get(p.site, 0) + 1
    # binomial spread around 100/12 per site
    assert set(counts) <= set(lenet.nodes)
    assert all(abs(c - 100 / 12) <= 8 + 100 / 12 for c in counts.values())


def test_plan_site_counts_multinomial(lenet):
    # uniform policy: per-site counts over 10,000 experiments pass a
    # chi-square goodness-of-fit test at 99% confidence
    import scipy.stats

    config = lenet_config(experiments=10_000)
    plan = plan_campaign(config, lenet, default_db())
    counts = {nid: 0 for nid in lenet.order}
    for p in plan:
        counts[p.site] += 1
    observed = [counts[nid] for nid in lenet.order]
    _, p_value = scipy.stats.chisquare(observed)
    assert p_value > 0.01


def test_plan_weighted_policy_restricts_sites(lenet):
    config = lenet_config(policy_type="weighted",
                          policy_weights={"conv1": 1.0, "conv2": 3.0})
    plan = plan_campaign(config, lenet, default_db())
    assert {p.site for p in plan} <= {"conv1", "conv2"}


def test_plan_fails_without_fallback_naming_kind(lenet):
    config = lenet_config(fallback_enabled=False)
    with pytest.raises(ValidationError) as err:
        plan_campaign(config, lenet, default_db())
    msg = str(err.value)
    assert "Softmax" in msg and "Dense" in msg


def test_plan_seed_changes_plan(lenet):
    db = default_db()
    plan_a = plan_campaign(lenet_config(seed=1, experiments=200), lenet, db)
    plan_b = plan_campaign(lenet_config(seed=2, experiments=200), lenet, db)
    assert [p.site for p in plan_a] != [p.site for p in plan_b]


def test_run_campaign_record_count_and_determinism(lenet):
    db = default_db()
    config = lenet_config(experiments=40)
    recs_a, report_a = run_campaign(config, lenet, db, build_policy(config.classifier))
    recs_b, _ = run_campaign(config, lenet, db, build_policy(config.classifier))
    assert len(recs_a) == 40
    lines_a = [record_to_json_line(r) for r in recs_a]
    lines_b = [record_to_json_line(r) for r in recs_b]
    assert lines_a == lines_b
    totals = report_a.totals
    assert totals["experiments"] == 40
    assert sum(totals[o] for o in ("masked", "usable", "unusable", "engine_error")) == 40


def test_run_campaign_differs_across_seeds(lenet):
    db = default_db()
    ra, _ = run_campaign(lenet_config(seed=1), lenet, db, build_policy({"policy": "top1"}))
    rb, _ = run_campaign(lenet_config(seed=2), lenet, db, build_policy({"policy": "top1"}))
    assert [record_to_json_line(r) for r in ra] != [record_to_json_line(r) for r in rb]


def test_run_campaign_worker_counts_identical(lenet):
    db = default_db()
    outs = []
    for workers in (1, 4):
        config = lenet_config(experiments=30, workers=workers)
        recs, _ = run_campaign(config, lenet, db, build_policy(config.classifier))
        outs.append("\n".join(record_to_json_line(r) for r in recs))
    assert outs[0] == outs[1]


def test_cache_transparency(lenet):
    db = default_db()
    on = lenet_config(experiments=30, cache_enabled=True)
    off = lenet_config(experiments=30, cache_enabled=False)
    recs_on, rep_on = run_campaign(on, lenet, db, build_policy(on.classifier))
    recs_off, _ = run_campaign(off, lenet, db, build_policy(off.classifier))
    assert [record_to_json_line(r) for r in recs_on] == \
           [record_to_json_line(r) for r in recs_off]
    assert rep_on.metadata["cache"]["hits"] > 0


def test_cache_lru_eviction():
    cache = PrefixCache(capacity=2)
    cache.put((0, "a"), 1)
    cache.put((0, "b"), 2)
    assert cache.get((0, "a")) == 1
    cache.put((0, "c"), 3)  # evicts b (least recently used)
    assert cache.get((0, "b")) is None
    assert cache.get((0, "a")) == 1 and cache.get((0, "c")) == 3


def test_records_stream_to_sink(lenet):
    db = default_db()
    config = lenet_config(experiments=10)
    sink = io.StringIO()
    recs, _ = run_campaign(config, lenet, db, build_policy(config.classifier),
                           records_sink=sink)
    lines = [l for l in sink.getvalue().splitlines() if l]
    assert len(lines) == 10
    assert [json.loads(l)["index"] for l in lines] == list(range(10))


def test_zero_on_zero_final_node_masks():
    # Zero-domain event hitting an already-zero location of the final
    # node's output leaves the output bit-identical: masked
    nodes = [
        OperatorNode("relu", "LeakyReLU", {"slope": 0.5}, {}, ("x",)),
        OperatorNode("out", "Flatten", {}, {}, ("relu",)),
    ]
    g = Graph(nodes, {"x": (1, 2)}, ["out"])
    db = errordb.db_from_dict({
        "Flatten": {
            "spatial_freq": {"single_point": 1.0},
            "domain_freq": {"zero": 1.0},
            "provenance": {},
        },
        "LeakyReLU": {
            "spatial_freq": {"single_point": 1.0},
            "domain_freq": {"zero": 1.0},
            "provenance": {},
        },
    })
    config = CampaignConfig(
        experiments=20, seed=3,
        input_sets=[{"x": np.zeros((1, 2), np.float32)}],
        policy_type="weighted", policy_weights={"out": 1.0},
        classifier={"policy": "tolerance", "epsilon": 1.0},
    ).validate()
    recs, report = run_campaign(config, g, db, build_policy(config.classifier))
    assert report.totals["masked"] == 20
    assert all(r.outcome.variant == MASKED for r in recs)


def test_engine_errors_recorded_not_raised(lenet, monkeypatch):
    db = default_db()
    config = lenet_config(experiments=5)
    import errsim.saboteur as sab

    real = sab.execute_from
    calls = []

    def flaky(graph, start, replaced, inputs=None, trace=None):
        calls.append(start)
        if len(calls) == 3:
            raise RuntimeError("synthetic failure")
        return real(graph, start, replaced, inputs=inputs, trace=trace)

    monkeypatch.setattr(sab, "execute_from", flaky)
    recs, report = run_campaign(config, lenet, db, build_policy(config.classifier))
    assert len(recs) == 5
    assert report.totals["engine_error"] == 1
    failed = [r for r in recs if r.outcome.variant == ENGINE_ERROR]
    assert "synthetic failure" in failed[0].outcome.detail["error"]


def test_record_json_round_trip(lenet):
    db = default_db()
    config = lenet_config(experiments=3)
    recs, _ = run_campaign(config, lenet, db, build_policy(config.classifier))
    for rec in recs:
        clone = record_from_json(json.loads(record_to_json_line(rec)))
        assert record_to_json(clone) == record_to_json(rec)


def test_load_records_reports_line_number(tmp_path, lenet):
    db = default_db()
    config = lenet_config(experiments=2)
    recs, _ = run_campaign(config, lenet, db, build_policy(config.classifier))
    path = tmp_path / "records.jsonl"
    path.write_text("\n".join(record_to_json_line(r) for r in recs) + "\n{bad\n")
    with pytest.raises(ValidationError, match="line 3"):
        load_records(path)


def test_config_from_toml(tmp_path):
    img = tmp_path / "img.bin"
    img.write_bytes(np.zeros(784, np.float32).tobytes())
    cfg_path = tmp_path / "campaign.toml"
    cfg_path.write_text(f"""
experiments = 12
seed = 5
workers = 2
db = "default"

[policy]
type = "uniform"

[inputs]
image = "{img}"

[classifier]
policy = "topk"
k = 3

[generation]
fallback_enabled = true
row_skip_p = 0.3

[cache]
capacity = 16

[output]
records = "records.jsonl"
""")
    config = CampaignConfig.from_file(cfg_path)
    assert config.experiments == 12
    assert config.seed == 5
    assert config.workers == 2
    assert config.db_path == "default"
    assert config.classifier == {"policy": "topk", "k": 3}
    assert config.fallback_enabled is True
    assert config.row_skip_p == 0.3
    assert config.cache_capacity == 16
    assert config.records_path == "records.jsonl"


def test_config_validation_errors():
    with pytest.raises(ValidationError, match="experiments"):
        CampaignConfig(experiments=0, seed=1, input_sets=[{}]).validate()
    with pytest.raises(ValidationError, match="input"):
        CampaignConfig(experiments=1, seed=1, input_sets=[]).validate()
    with pytest.raises(ValidationError, match="positive sum"):
        CampaignConfig(experiments=1, seed=1, input_sets=[{}],
                       policy_type="weighted",
                       policy_weights={"a": 0.0}).validate()
    with pytest.raises(ValidationError, match="domain_override"):
        CampaignConfig(experiments=1, seed=1, input_sets=[{}],
                       domain_override="weird").validate()


def test_round_trip_spatial_recovery_through_campaign(lenet):
    # round trip shared with the analyzer: every structured event a
    # campaign generates is recovered from the corrupted site tensor
    db = default_db()
    config = lenet_config(experiments=25)
    image = config.input_sets[0]["image"]
    trace = execute(lenet, {"image": image})
    recs, _ = run_campaign(config, lenet, db, build_policy(config.classifier))
    checked = 0
    for rec in recs:
        golden = trace[rec.site]
        ev = rec.event
        corrupted = corrupt_values(
            golden, ev.targets, ev.domains,
            np.random.default_rng(1))
        cls = analyze_pair(golden, corrupted)
        if cls is None:
            continue  # zero-onto-zero collisions can mask
        checked += 1
        if cls.cardinality == len(ev.targets):
            assert cls.spatial == ev.spatial.variant
    assert checked > 0

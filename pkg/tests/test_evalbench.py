"""Evaluation reports, tiled generation, latency bench, style-shift probes."""

import json

import numpy as np
import pytest

from resolab.adapters import attach_resadapter, attach_style_lora
from resolab.data import SyntheticDataset
from resolab.diffusion import SamplerConfig, build_schedule, ddim_sample
from resolab.errors import ConfigError, ShapeError
from resolab.evalbench import (
    EvalReport,
    EvalRow,
    HELDOUT_METRIC,
    ablation_grid,
    bench_latency,
    make_style_probes,
    multires_eval,
    style_shift,
    tile_layout,
    tiled_generate,
)
from resolab.unet import UNetConfig, build_unet

SMALL = UNetConfig(in_channels=1, base_channels=4, channel_mults=(1, 2),
                   num_res_blocks_per_level=1, groups=4, time_embed_dim=8,
                   num_classes=2)


def small_model(seed=0):
    model = build_unet(SMALL, seed=seed)
    rng = np.random.default_rng(40 + seed)
    model.params["out.conv.weight"].data += 0.3 * rng.standard_normal(
        model.params["out.conv.weight"].shape)
    return model


def randomized_bundle(model, seed=5, scale=0.05):
    bundle = attach_resadapter(model, rank=2, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for t in bundle.named_tensors().values():
        t.data = scale * rng.standard_normal(t.shape)
    return bundle


SCHED = build_schedule(10, 1e-4, 0.05)
DS = SyntheticDataset("checkers", 2, 1)


# ---------------------------------------------------------------------------
# report plumbing


def test_duplicate_row_rejected():
    report = EvalReport()
    report.add(EvalRow((8, 8), "base", HELDOUT_METRIC, 1.0))
    with pytest.raises(ConfigError, match="duplicate report row"):
        report.add(EvalRow((8, 8), "base", HELDOUT_METRIC, 2.0))


def test_row_json_shape():
    row = EvalRow((8, 16), "base", HELDOUT_METRIC, 0.25)
    doc = json.loads(row.to_json())
    assert doc == {"bucket": "8x16", "variant": "base",
                   "metric": HELDOUT_METRIC, "value": 0.25}


def test_jsonl_line_per_row():
    report = EvalReport(metadata={"seed": 7})
    report.add(EvalRow((8, 8), "base", HELDOUT_METRIC, 1.0))
    report.add(EvalRow((16, 16), "base", HELDOUT_METRIC, 2.0))
    lines = report.jsonl().splitlines()
    assert len(lines) == 3
    assert json.loads(lines[0]) == {"metadata": {"seed": 7}}
    assert json.loads(lines[2])["bucket"] == "16x16"


def test_table_is_aligned_text():
    report = EvalReport()
    report.add(EvalRow((8, 8), "base", HELDOUT_METRIC, 0.5))
    text = report.table()
    assert "bucket" in text and "8x8" in text and "0.5" in text


def test_value_lookup_missing_raises():
    with pytest.raises(KeyError):
        EvalReport().value((8, 8), "base")


# ---------------------------------------------------------------------------
# multires_eval


def test_multires_eval_deterministic():
    model = small_model()
    a = multires_eval(model, None, SCHED, DS, [(8, 8), (16, 16)], n_batches=2, seed=3)
    b = multires_eval(model, None, SCHED, DS, [(8, 8), (16, 16)], n_batches=2, seed=3)
    for row in a.rows:
        assert b.value(row.bucket, row.variant) == row.value


def test_bucket_draws_do_not_depend_on_bucket_list():
    model = small_model()
    alone = multires_eval(model, None, SCHED, DS, [(8, 8)], n_batches=2, seed=3)
    paired = multires_eval(model, None, SCHED, DS, [(16, 16), (8, 8)], n_batches=2, seed=3)
    assert paired.value((8, 8), "base") == alone.value((8, 8), "base")


def test_identity_bundle_matches_base_exactly():
    model = small_model()
    bundle = attach_resadapter(model, rank=2, seed=1)  # B zero-init: no-op
    report = multires_eval(model, bundle, SCHED, DS, [(8, 8)], n_batches=2, seed=3)
    assert report.value((8, 8), "base+resadapter") == report.value((8, 8), "base")


def test_style_lora_variant_name():
    model = small_model()
    bundle = attach_style_lora(model, rank=2, seed=1)
    report = multires_eval(model, bundle, SCHED, DS, [(8, 8)], n_batches=1, seed=3)
    assert {r.variant for r in report.rows} == {"base", "base+style-lora"}


def test_empty_buckets_rejected():
    with pytest.raises(ConfigError, match="empty bucket"):
        multires_eval(small_model(), None, SCHED, DS, [])


def test_metadata_fields_present():
    report = multires_eval(small_model(), None, SCHED, DS, [(8, 8)], n_batches=1, seed=3)
    assert {"seed", "fingerprint", "n_batches", "batch_size", "wall_clock_s"} <= set(
        report.metadata)


# ---------------------------------------------------------------------------
# ablation grid


def test_ablation_grid_rows_and_alpha_zero():
    model = small_model()
    bundle = randomized_bundle(model)
    modes = [set(), {"conv_lora"}, {"conv_lora", "norm_delta"}]
    report = ablation_grid(model, bundle, modes, (0.0, 0.5, 1.0), SCHED, DS,
                           [(8, 8)], n_batches=1, seed=3)
    assert len(report.rows) == 1 + 9  # base row plus 3 modes x 3 alphas
    base = report.value((8, 8), "base")
    for mode_label in ("none", "conv_lora", "conv_lora+norm_delta"):
        assert report.value((8, 8), f"base+resadapter[{mode_label}]@alpha=0") == base


def test_ablation_full_bundle_cell_changes_loss():
    model = small_model()
    bundle = randomized_bundle(model)
    report = ablation_grid(model, bundle, [{"conv_lora", "norm_delta"}], (1.0,),
                           SCHED, DS, [(8, 8)], n_batches=1, seed=3)
    cell = report.value((8, 8), "base+resadapter[conv_lora+norm_delta]@alpha=1")
    assert cell != report.value((8, 8), "base")


def test_ablation_empty_axes_rejected():
    model = small_model()
    bundle = randomized_bundle(model)
    with pytest.raises(ConfigError, match="must be non-empty"):
        ablation_grid(model, bundle, [], (1.0,), SCHED, DS, [(8, 8)])
    with pytest.raises(ConfigError, match="must be non-empty"):
        ablation_grid(model, bundle, [{"conv_lora"}], (), SCHED, DS, [(8, 8)])


# ---------------------------------------------------------------------------
# tiling


def test_tile_layout_regular_grid():
    origins, counts = tile_layout((32, 32), (16, 16), 8)
    assert origins == [(y, x) for y in (0, 8, 16) for x in (0, 8, 16)]
    assert counts.shape == (32, 32)
    assert counts.min() >= 1.0


def test_tile_layout_counts_match_covering_tiles():
    origins, counts = tile_layout((32, 32), (16, 16), 8)
    for (py, px) in ((0, 0), (12, 12), (31, 31), (8, 20)):
        covering = sum(1 for y, x in origins if y <= py < y + 16 and x <= px < x + 16)
        assert counts[py, px] == covering


def test_tile_layout_clamps_final_position():
    origins, _ = tile_layout((20, 20), (16, 16), 8)
    assert origins == [(0, 0), (0, 4), (4, 0), (4, 4)]


def test_tile_layout_overlap_bounds():
    with pytest.raises(ConfigError, match="overlap must be in"):
        tile_layout((32, 32), (16, 16), 16)
    with pytest.raises(ConfigError, match="overlap must be in"):
        tile_layout((32, 32), (16, 16), -1)


def test_tile_larger_than_target():
    with pytest.raises(ShapeError, match="larger than target"):
        tile_layout((8, 8), (16, 16), 0)


def test_blend_weights_sum_to_one():
    origins, counts = tile_layout((32, 32), (16, 16), 8)
    weight_sum = np.zeros((32, 32))
    for y, x in origins:
        weight_sum[y:y + 16, x:x + 16] += 1.0 / counts[y:y + 16, x:x + 16]
    np.testing.assert_array_equal(weight_sum, np.ones((32, 32)))


def test_degenerate_tiling_equals_direct_sampling():
    model = small_model()
    cfg = SamplerConfig(steps=4, guidance_scale=1.0, eta=0.0, seed=9)
    tiled = tiled_generate(model, SCHED, (16, 16), (16, 16), 0, cfg, [0])
    direct = ddim_sample(model, (1, 1, 16, 16), cfg, [0], SCHED)
    assert tiled.data.tobytes() == direct.data.tobytes()


def test_tiled_output_shape():
    model = small_model()
    cfg = SamplerConfig(steps=2, guidance_scale=1.0, eta=0.0, seed=9)
    out = tiled_generate(model, SCHED, (16, 24), (8, 8), 4, cfg, [1])
    assert out.shape == (1, 1, 16, 24)


# ---------------------------------------------------------------------------
# latency


def test_bench_latency_keys_and_ratio():
    model = small_model()
    cfg = SamplerConfig(steps=2, guidance_scale=1.0, eta=0.0, seed=9)
    out = bench_latency(model, None, (16, 16), (8, 8), 0, cfg, [0], SCHED, repeats=1)
    assert {"direct_ms", "tiled_ms", "ratio", "repeats"} <= set(out)
    assert out["ratio"] == out["tiled_ms"] / out["direct_ms"]
    assert len(out["tiled_runs_ms"]) == 1


def test_bench_latency_repeats_validated():
    model = small_model()
    cfg = SamplerConfig(steps=2, guidance_scale=1.0, eta=0.0, seed=9)
    with pytest.raises(ConfigError, match="repeats must be >= 1"):
        bench_latency(model, None, (16, 16), (8, 8), 0, cfg, [0], SCHED, repeats=0)


# ---------------------------------------------------------------------------
# style probes and shift


def test_make_style_probes_deterministic():
    a = make_style_probes(DS, SCHED, 16, 4, seed=11)
    b = make_style_probes(DS, SCHED, 16, 4, seed=11)
    assert len(a) == 4
    for (xa, ta, ca), (xb, tb, cb) in zip(a, b):
        assert xa.shape == (1, 1, 16, 16)
        assert 1 <= ta <= SCHED.timesteps and ta == tb
        np.testing.assert_array_equal(xa.data, xb.data)
        np.testing.assert_array_equal(ca, cb)


def test_style_shift_zero_for_identity_bundle():
    model = small_model()
    fresh = attach_resadapter(model, rank=2, seed=1)
    trained = randomized_bundle(model)
    probes = make_style_probes(DS, SCHED, 16, 3, seed=11)
    s_fresh, s_trained = style_shift(model, fresh, trained, probes)
    assert s_fresh == 0.0
    assert s_trained > 0.0


def test_style_shift_grows_with_alpha_for_fixed_bundle():
    model = small_model()
    bundle = randomized_bundle(model)
    probes = make_style_probes(DS, SCHED, 16, 3, seed=11)
    half, full = style_shift(model, bundle.with_alpha(0.5), bundle, probes)
    assert 0.0 < half < full


def test_style_shift_requires_probes():
    model = small_model()
    bundle = randomized_bundle(model)
    with pytest.raises(ConfigError, match="at least one probe"):
        style_shift(model, bundle, bundle, [])

import csv

import numpy as np
import pytest

from dynsplat.trainer import (ABLATION_MODES, LOG_COLUMNS, TrainingAborted, build_model, format_table,
                              mode_config, train)


@pytest.fixture(scope="module")
def ds(tiny_scene):
    from dynsplat.datasets import load_scene
    return load_scene(tiny_scene[0])


def params_equal(a, b):
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


class TestSchedule:
    def test_zero_iterations_is_init(self, ds, small_cfg):
        cfg = small_cfg.replace(total_iters=0, warmup_iters=0)
        res = train(ds, cfg)
        assert res.history == [] and res.checkpoint.iteration == 0
        assert params_equal(res.checkpoint.model.params(), build_model(ds, cfg).params())

    def test_zero_lr_changes_nothing(self, ds, small_cfg):
        cfg = small_cfg.replace(lr=0.0, densify_start=100, densify_stop=100)
        res = train(ds, cfg)
        assert len(res.history) == cfg.total_iters
        assert params_equal(res.checkpoint.model.params(), build_model(ds, cfg).params())

    def test_warmup_freezes_deformation(self, ds, small_cfg):
        cfg = small_cfg.replace(densify_start=100, densify_stop=100)
        model = build_model(ds, cfg)
        grids0 = {k: v.copy() for k, v in model.field.grids.items()}
        dec0 = {k: v.copy() for k, v in model.decoder.items()}
        pos0 = model.cloud.positions.copy()
        seen = {}

        def progress(it, loss, p):
            if it == cfg.warmup_iters:
                seen["grids"] = {k: v.copy() for k, v in model.field.grids.items()}
                seen["dec"] = {k: v.copy() for k, v in model.decoder.items()}
                seen["pos"] = model.cloud.positions.copy()

        train(ds, cfg, model=model, progress=progress)
        assert params_equal(seen["grids"], grids0) and params_equal(seen["dec"], dec0)
        assert not np.array_equal(seen["pos"], pos0)
        # joint phase does move the network
        assert not params_equal(model.field.grids, grids0)

    def test_temporal_term_skips_first_frame(self, ds, small_cfg):
        cfg = small_cfg.replace(warmup_iters=1, total_iters=9, densify_start=100, densify_stop=100)
        hist = train(ds, cfg).history
        n_train = len(ds.train_indices)
        for h in hist:
            j = (h["iter"] - 1) % n_train
            if h["iter"] <= cfg.warmup_iters + 1 or j == 0:
                assert h["L_temporal"] == 0.0
        assert any(h["L_temporal"] > 0 for h in hist)

    def test_densify_respects_budget(self, ds, small_cfg):
        n0 = len(build_model(ds, small_cfg).cloud)
        cfg = small_cfg.replace(densify_grad_threshold=0.0, max_gaussians=n0 + 10, total_iters=8,
                                densify_start=2, densify_interval=2, densify_stop=6, opacity_min=1e-6)
        res = train(ds, cfg)
        assert n0 < len(res.checkpoint.model.cloud) <= n0 + 10


class TestLogging:
    def test_csv_deterministic(self, ds, small_cfg, tmp_path):
        train(ds, small_cfg, log_path=tmp_path / "a.csv")
        train(ds, small_cfg, log_path=tmp_path / "b.csv")
        a = (tmp_path / "a.csv").read_bytes()
        assert a == (tmp_path / "b.csv").read_bytes()
        rows = list(csv.reader(a.decode().splitlines()))
        assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == small_cfg.total_iters + 1
        assert all(r[-1] == "" for r in rows[1:])

    def test_history_matches_terms(self, tiny_trained):
        _, cfg, res = tiny_trained
        for h in res.history:
            tot = (cfg.lambda_color * h["L_color"] + cfg.lambda_depth * h["L_depth"]
                   + cfg.lambda_spatial * h["L_spatial"] + cfg.lambda_temporal * h["L_temporal"])
            assert h["loss"] == pytest.approx(tot, rel=1e-12)


class TestAbort:
    @pytest.mark.parametrize("attr, pat", [("sh_coeffs", "non-finite loss"),
                                           ("opacity_logits", "non-finite gradient")])
    def test_nan_raises_with_checkpoint(self, ds, small_cfg, attr, pat):
        model = build_model(ds, small_cfg)
        getattr(model.cloud, attr)[:] = np.nan
        with pytest.raises(TrainingAborted, match=pat) as ei:
            train(ds, small_cfg, model=model)
        assert ei.value.iteration == 1 and ei.value.checkpoint.iteration == 0

    def test_needs_two_timestamps(self, ds, small_cfg):
        import copy
        one = copy.copy(ds)
        one.frames = [f for f in ds.frames if f.time == ds.frames[0].time]
        with pytest.raises(ValueError, match="two distinct"):
            train(one, small_cfg)


class TestAblation:
    def test_mode_wiring(self, small_cfg):
        m = {k: mode_config(small_cfg, k) for k in ABLATION_MODES}
        assert (m["full"].decoder, m["full"].enable3d, m["full"].enable2d) == ("sad", True, True)
        assert (m["baseline"].decoder, m["baseline"].enable3d, m["baseline"].enable2d) == ("mlp", False, False)
        assert (m["no_filters"].decoder, m["no_filters"].enable2d) == ("sad", False)
        assert (m["no_sad"].decoder, m["no_sad"].enable2d) == ("mlp", True)
        d = {k for k in m["full"].to_dict() if m["full"].to_dict()[k] != m["no_sad"].to_dict()[k]}
        assert d == {"decoder"}
        assert len({c.hash() for c in m.values()}) == 4
        with pytest.raises(ValueError):
            mode_config(small_cfg, "nope")

    def test_table_layout(self):
        rows = [{"mode": k, "psnr": 30.0 + i, "ssim": 0.9, "lpips": "n/a"} for i, k in enumerate(ABLATION_MODES)]
        lines = format_table(rows).splitlines()
        assert lines[0].split() == ["Model", "PSNR", "SSIM", "LPIPS"]
        assert [l[:16].strip() for l in lines[1:]] == ["Baseline", "w/o Alias-Free", "w/o SAD", "Full"]
        assert lines[4].split()[-3:] == ["33.000", "0.9000", "n/a"]

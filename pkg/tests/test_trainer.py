import numpy as np
import pytest

from conftest import smooth_image
from lapsrn.data import bicubic_resize, build_gt_pyramid
from lapsrn.errors import InvalidArgumentError, NumericError
from lapsrn.metrics import psnr
from lapsrn.model import LapSRNConfig, build_model, super_resolve
from lapsrn.tensor import Parameter, finite_difference_grad, relative_error
from lapsrn.trainer import (
    CSVLog,
    TrainConfig,
    TrainLogRecord,
    lr_schedule,
    multiscale_loss,
    parse_config_text,
    schedule_finished,
    sgd_step,
    split_config,
    train,
)


def scalar_param(w=1.0, decay=True):
    return Parameter(np.array([w], dtype=np.float64), decay=decay)


class TestMultiscaleLoss:
    def test_equal_outputs(self, rng):
        outs = [rng.uniform(size=(1, 1, n, n)) for n in (4, 8, 16)]
        assert multiscale_loss(outs, outs)[0] == pytest.approx(3e-3)
        assert multiscale_loss(outs, outs, "l2")[0] == 0.0

    def test_sum_of_levels_gradient(self, rng):
        outs = [rng.normal(size=(1, 1, n, n)) for n in (2, 4)]
        tgts = [rng.normal(size=o.shape) for o in outs]
        _, grads = multiscale_loss(outs, tgts)
        for level in range(2):
            def f(v, level=level):
                trial = list(outs)
                trial[level] = v
                return multiscale_loss(trial, tgts)[0]
            assert relative_error(grads[level], finite_difference_grad(f, outs[level])) < 1e-4

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            multiscale_loss([np.zeros((1, 1, 2, 2))], [])
        with pytest.raises(InvalidArgumentError):
            multiscale_loss([np.zeros((1, 1, 2, 2))], [np.zeros((1, 1, 2, 2))], loss_kind="huber")


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 1e-5), (49, 1e-5), (50, 5e-6), (100, 2.5e-6), (170, 1.25e-6)])
    def test_values(self, epoch, lr):
        assert lr_schedule(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)

    def test_floor_and_stop(self):
        cfg = TrainConfig()
        assert not schedule_finished(199, cfg)
        assert schedule_finished(200, cfg)
        assert lr_schedule(400, cfg) == cfg.lr_floor
        assert schedule_finished(3, TrainConfig(max_epochs=3))

    def test_negative_epoch(self):
        with pytest.raises(InvalidArgumentError):
            lr_schedule(-1, TrainConfig())


class TestSGD:
    def test_two_momentum_steps(self):
        cfg = TrainConfig(weight_decay=0.0, momentum=0.9)
        params = {"w": scalar_param()}
        for m, w in ((1.0, 0.9), (1.9, 0.71)):
            params["w"].grad[:] = 1.0
            sgd_step(params, cfg, lr=0.1)
            assert params["w"].momentum[0] == pytest.approx(m, abs=1e-15)
            assert params["w"].value[0] == pytest.approx(w, abs=1e-15)
            assert params["w"].grad[0] == 0.0

    def test_decay_on_weights_only(self):
        cfg = TrainConfig()
        params = {"conv.weight": scalar_param(), "conv.bias": scalar_param(decay=False)}
        sgd_step(params, cfg, lr=1e-5)
        assert 1.0 - params["conv.weight"].value[0] == pytest.approx(1e-9, rel=1e-6)
        assert params["conv.bias"].value[0] == 1.0

    def test_zero_everything_is_a_no_op(self):
        params = {"w": scalar_param(0.37)}
        sgd_step(params, TrainConfig(weight_decay=0.0), lr=0.1)
        assert params["w"].value[0] == 0.37

    def test_lr_zero_bitwise(self, rng):
        value = rng.normal(size=(3, 3)).astype(np.float32)
        p = Parameter(value.copy())
        p.grad[:] = rng.normal(size=(3, 3))
        sgd_step({"w": p}, TrainConfig(), lr=0.0)
        assert p.value.tobytes() == value.tobytes()

    def test_matches_scalar_reference(self, rng):
        cfg = TrainConfig(momentum=0.8, weight_decay=1e-3)
        p = scalar_param(0.5)
        w, m = 0.5, 0.0
        for g in rng.normal(size=50):
            p.grad[:] = g
            sgd_step({"w": p}, cfg, lr=0.01)
            m = 0.8 * m + (g + 1e-3 * w)
            w = w - 0.01 * m
            assert p.value[0] == w

    def test_non_finite_gradient_named(self):
        params = {"good": scalar_param(), "level2.conv0.weight": scalar_param()}
        params["level2.conv0.weight"].grad[:] = np.nan
        with pytest.raises(NumericError, match="level2.conv0.weight"):
            sgd_step(params, TrainConfig(), lr=0.1)
        assert params["good"].value[0] == 1.0

    def test_clipping(self):
        params = {"a": scalar_param(0.0), "b": scalar_param(0.0)}
        params["a"].grad[:] = 3.0
        params["b"].grad[:] = 4.0
        sgd_step(params, TrainConfig(grad_clip=1.0, weight_decay=0.0), lr=1.0)
        assert params["a"].value[0] == pytest.approx(-0.6)
        assert params["b"].value[0] == pytest.approx(-0.8)


class TestTrainConfig:
    @pytest.mark.parametrize("kwargs,field", [
        ({"lr_init": 1e-7}, "lr_init"), ({"momentum": 1.0}, "momentum"), ({"weight_decay": -1}, "weight_decay"),
        ({"batch_n": 0}, "batch_n"), ({"loss_reduction": "max"}, "loss_reduction"), ({"grad_clip": 0.0}, "grad_clip"),
    ])
    def test_invalid(self, kwargs, field):
        with pytest.raises(InvalidArgumentError, match=field):
            TrainConfig(**kwargs)

    def test_config_text(self):
        text = "# run\nscale = 2\nlr_init = 2e-5   # faster\n\naugment = no\ngrad_clip = none\nloss_kind = l2\n"
        model_kw, train_kw = split_config(parse_config_text(text), LapSRNConfig, TrainConfig)
        assert model_kw == {"scale": 2, "loss_kind": "l2"}
        assert train_kw == {"lr_init": 2e-5, "augment": False, "grad_clip": None}
        with pytest.raises(InvalidArgumentError, match="unknown"):
            split_config({"learning_rate": "1"}, LapSRNConfig, TrainConfig)
        with pytest.raises(InvalidArgumentError, match="line 1"):
            parse_config_text("scale 2")


class TestDeepSupervision:
    def _grads(self, level_mask):
        model = build_model(LapSRNConfig(scale=4, depth=1, channels=4), seed=1, dtype=np.float64)
        r = np.random.default_rng(0)
        cache = {}
        outs = model.forward(r.uniform(size=(1, 1, 4, 4)), cache=cache)
        _, grads = multiscale_loss(outs, [o + r.uniform(0.1, 0.2, o.shape) for o in outs])
        model.zero_grad()
        model.backward(cache, [g if keep else None for g, keep in zip(grads, level_mask)])
        return model

    def test_level_one_learns_from_each_level(self):
        for mask in ((True, False), (False, True)):
            model = self._grads(mask)
            assert np.abs(model.params["level1.conv0.weight"].grad).sum() > 0
            assert np.abs(model.params["input.weight"].grad).sum() > 0


class TestTrainLoop:
    def test_smoke(self, tmp_path):
        corpus = [smooth_image(80, 80, seed=s) for s in range(2)]
        model = build_model(LapSRNConfig(scale=2, depth=1, channels=4))
        cfg = TrainConfig(iters_per_epoch=5, batch_n=2, patch_size=32, max_epochs=1)
        seen = []
        _, records = train(model, corpus, cfg, out_dir=tmp_path, callbacks=[seen.append])
        assert len(records) == 5 == len(seen)
        assert [(r.epoch, r.iter) for r in records] == [(0, i) for i in range(5)]
        assert all(np.isfinite(r.loss) for r in records)
        lines = (tmp_path / "train.csv").read_text().splitlines()
        assert lines[0] == "epoch,iter,loss,lr,wall_ms" and len(lines) == 6
        assert (tmp_path / "epoch_0000.lpsr").exists()

    def test_interrupt_writes_checkpoint(self, tmp_path):
        def stop(rec):
            if rec.iter == 1:
                raise KeyboardInterrupt

        model = build_model(LapSRNConfig(scale=2, depth=1, channels=2))
        cfg = TrainConfig(iters_per_epoch=5, batch_n=1, patch_size=16, max_epochs=1)
        with pytest.raises(KeyboardInterrupt):
            train(model, [smooth_image(40, 40)], cfg, out_dir=tmp_path, callbacks=[stop])
        assert (tmp_path / "interrupt.lpsr").exists()
        assert len((tmp_path / "train.csv").read_text().splitlines()) == 3

    def test_single_step_variant_trains(self):
        model = build_model(LapSRNConfig(scale=4, depth=1, channels=3, use_pyramid=False))
        cfg = TrainConfig(iters_per_epoch=2, batch_n=1, patch_size=16, max_epochs=1, augment=False)
        _, records = train(model, [smooth_image(32, 32)], cfg)
        assert len(records) == 2

    def test_csv_appends(self, tmp_path):
        log = CSVLog(tmp_path / "t.csv")
        log(TrainLogRecord(0, 0, 0.5, 1e-5, 1.25))
        log.close()
        log = CSVLog(tmp_path / "t.csv")
        log(TrainLogRecord(0, 1, 0.25, 1e-5, 1.0))
        log.close()
        assert (tmp_path / "t.csv").read_text().splitlines() == [
            "epoch,iter,loss,lr,wall_ms", "0,0,0.5,1e-05,1.250", "0,1,0.25,1e-05,1.000"]

    def test_empty_corpus(self):
        with pytest.raises(InvalidArgumentError):
            train(build_model(LapSRNConfig(scale=2, depth=1, channels=2)), [], TrainConfig())


@pytest.mark.slow
def test_sum_reduction_fallback_overfits(camera64):
    """The documented fallback (loss summed over pixels, learning rate 1e-5) on the overfit task."""
    pyr = build_gt_pyramid(camera64, 2)
    model = build_model(LapSRNConfig(scale=2, depth=2), seed=0)
    cfg = TrainConfig(lr_init=1e-5, iters_per_epoch=500, batch_n=1, patch_size=64, augment=False,
                      max_epochs=1, loss_reduction="sum")
    model, records = train(model, [camera64], cfg)
    x = pyr.lr[None, None].astype(np.float32)
    final = multiscale_loss(model.forward(x), [lv[None, None] for lv in pyr.levels], reduction="sum")[0]
    assert final <= 0.3 * records[0].loss
    bicubic_db = psnr(camera64, bicubic_resize(pyr.lr, 64, 64), 2)
    assert psnr(camera64, super_resolve(model, pyr.lr, 2)[-1], 2) > bicubic_db

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fpquality.net import ModelConfig, load_checkpoint
from fpquality.pipeline import run_labeling, synth_dataset
from fpquality.train import (
    STD_EPS,
    LossWeights,
    TrainConfig,
    TrainError,
    build_model,
    cosine,
    csv_oracle,
    finetune,
    loss_feat,
    loss_qual,
    loss_sim,
    lq_ratio_oracle,
    make_optimizer,
    poly_lr,
    pretrain,
    read_log,
    to_tensor,
    write_log,
)
from numeric import relative_error

T = torch.tensor


def vec(*xs):
    return T([list(xs)], dtype=torch.float64)


class TestLossSim:
    def test_identical_mated(self):
        x = vec(1.0, 2.0, -3.0)
        assert loss_sim(x, x, T([1.0])).item() == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal_non_mated(self):
        assert loss_sim(vec(1.0, 0.0), vec(0.0, 2.0), T([-1.0])).item() == pytest.approx(0.0, abs=1e-6)

    def test_identical_non_mated(self):
        x = vec(0.5, 0.5)
        assert loss_sim(x, x, T([-1.0])).item() == pytest.approx(1.0, abs=1e-6)

    def test_opposite_mated(self):
        x = vec(1.0, -2.0)
        assert loss_sim(x, -x, T([1.0])).item() == pytest.approx(2.0, abs=1e-6)

    def test_margin(self):
        # cos = 0.6, margin 0.5 -> 0.1
        assert loss_sim(vec(1.0, 0.0), vec(0.6, 0.8), T([-1.0]), m=0.5).item() == pytest.approx(0.1, abs=1e-6)

    def test_zero_vector_guarded(self):
        out = loss_sim(vec(0.0, 0.0), vec(1.0, 1.0), T([1.0]))
        assert torch.isfinite(out).all() and out.item() == pytest.approx(1.0)

    def test_spatial_embeddings_flattened(self):
        x = torch.randn(3, 4, 2, 2, dtype=torch.float64)
        torch.testing.assert_close(cosine(x, 2 * x), torch.ones(3, dtype=torch.float64))

    @settings(max_examples=100, deadline=None)
    @given(a=st.floats(1e-3, 1e3), b=st.floats(1e-3, 1e3), seed=st.integers(0, 10_000), y=st.sampled_from([1.0, -1.0]))
    def test_scale_invariant(self, a, b, seed, y):
        g = torch.Generator().manual_seed(seed)
        x_c = torch.randn(2, 6, generator=g, dtype=torch.float64)
        x_g = torch.randn(2, 6, generator=g, dtype=torch.float64)
        yy = T([y, y])
        torch.testing.assert_close(loss_sim(a * x_c, b * x_g, yy), loss_sim(x_c, x_g, yy), atol=1e-6, rtol=0)


def _cos_pair(cos):
    return vec(1.0, 0.0), vec(cos, math.sqrt(1 - cos * cos))


class TestLossFeat:
    def test_exact_fit(self):
        x = vec(1.0, 1.0)
        assert loss_feat(T([0.7]), T([0.7]), x, x, T([1.0])).item() == pytest.approx(0.0, abs=1e-6)

    def test_hand_example(self):
        # s 0.8, prediction 0.6, loss_sim 0.1 -> 10 * 0.04 + 2 * 0.1
        x_c, x_g = _cos_pair(0.9)
        out = loss_feat(T([0.8], dtype=torch.float64), T([0.6], dtype=torch.float64), x_c, x_g, T([1.0]))
        assert out.item() == pytest.approx(0.6, abs=1e-6)

    def test_linear_in_lambda1(self):
        x = vec(1.0, 2.0)
        s, p, y = T([0.9]), T([0.3]), T([1.0])
        one = loss_feat(s, p, x, x, y, LossWeights(lambda1=10, lambda2=0)).item()
        two = loss_feat(s, p, x, x, y, LossWeights(lambda1=20, lambda2=0)).item()
        assert two == pytest.approx(2 * one, rel=1e-12)

    def test_batch_mean(self):
        x_c, x_g = torch.eye(2, dtype=torch.float64), torch.eye(2, dtype=torch.float64)
        out = loss_feat(T([1.0, 0.0]), T([0.0, 0.0]), x_c, x_g, T([1.0, 1.0]), LossWeights(lambda1=1, lambda2=0))
        assert out.item() == pytest.approx(0.5)

    def test_gradient_wrt_outputs(self):
        g = torch.Generator().manual_seed(0)
        x_g = torch.randn(3, 8, generator=g, dtype=torch.float64)
        pred = torch.rand(3, generator=g, dtype=torch.float64)
        s, y = T([0.2, 0.9, 0.5], dtype=torch.float64), T([1.0, -1.0, 1.0])
        x_c = torch.randn(3, 8, generator=g, dtype=torch.float64)
        # shift the non-mated pair so its hinge is active
        x_c[1] = x_g[1] + 0.1 * x_c[1]
        assert relative_error(lambda p: loss_feat(s, p, x_c, x_g, y), pred) <= 1e-4
        assert relative_error(lambda xc: loss_feat(s, pred, xc, x_g, y), x_c) <= 1e-4


class TestLossQual:
    def test_perfect(self):
        q_r = torch.randint(0, 5, (3, 2, 2)).double()
        assert loss_qual(T([0.4, 0.5, 0.6]), T([40.0, 50.0, 60.0]), q_r, q_r.clone()).item() == pytest.approx(0.0, abs=1e-6)

    def test_constant_map_offset(self):
        # MSE 1, mean gap 1, std gap 0 -> 10 * 2
        out = loss_qual(T([0.5]), T([50.0]), torch.full((1, 2, 2), 2.0), torch.full((1, 2, 2), 3.0))
        assert out.item() == pytest.approx(20.0, abs=1e-6)

    @pytest.mark.parametrize("delta", [0.1, 0.5, 1.0])
    def test_term_separation(self, delta):
        q_r = torch.full((1, 2, 2), 2.0, dtype=torch.float64)
        pert = T([[[delta, -delta], [-delta, delta]]], dtype=torch.float64)
        pred = q_r + pert
        w = LossWeights(lambda3=0.0)
        total = loss_qual(T([0.5]), T([50.0], dtype=torch.float64), q_r, pred, w).item()
        # independent decomposition: mean gap 0, MSE delta^2, std gap from population std
        sd = lambda a: math.sqrt(np.var(a) + STD_EPS)
        std_term = (sd(q_r.numpy().ravel()) - sd(pred.numpy().ravel())) ** 2
        assert q_r.mean() == pred.mean()
        assert total - w.lambda4 * std_term == pytest.approx(w.lambda4 * delta**2, abs=1e-6)

    def test_global_term_scale(self):
        # label/100 vs prediction/100 on the [0, 1] scale
        out = loss_qual(T([0.7]), T([20.0]), use_regional=False)
        assert out.item() == pytest.approx(0.1 * 0.25, abs=1e-6)

    def test_regional_dropped(self):
        out = loss_qual(T([0.5]), T([50.0]), torch.zeros(1, 2, 2), torch.full((1, 2, 2), 4.0), use_regional=False)
        assert out.item() == 0.0

    def test_grid_mismatch(self):
        with pytest.raises(TrainError):
            loss_qual(T([0.5]), T([50.0]), torch.zeros(1, 2, 2), torch.zeros(1, 3, 3))

    def test_missing_map(self):
        with pytest.raises(TrainError):
            loss_qual(T([0.5]), T([50.0]))

    def test_gradient_wrt_outputs(self):
        g = torch.Generator().manual_seed(1)
        q_g = torch.rand(2, generator=g, dtype=torch.float64)
        q_r = torch.randint(0, 5, (2, 3, 3), generator=g).double()
        pq = 100 * torch.rand(2, generator=g, dtype=torch.float64)
        pm = 4 * torch.rand(2, 3, 3, generator=g, dtype=torch.float64)
        assert relative_error(lambda p: loss_qual(q_g, p, q_r, pm), pq) <= 1e-4
        assert relative_error(lambda m: loss_qual(q_g, pq, q_r, m), pm) <= 1e-4

    def test_lambda4_zero_isolates_regional_head(self):
        model = build_model(ModelConfig(input_size=(64, 64), channels_c=8, spatial=(2, 2), map_out=(4, 4),
                                        attention_dim=4, regional_hidden=16), seed=0)
        out = model(torch.rand(2, 1, 64, 64))
        loss = loss_qual(T([0.3, 0.8]), out["quality"], torch.ones(2, 4, 4), out["qmap"], LossWeights(lambda4=0.0))
        loss.backward()
        for p in model.regional_head.parameters():
            assert p.grad is not None and torch.count_nonzero(p.grad) == 0
        assert any(torch.count_nonzero(p.grad) for p in model.quality_head.parameters())


def test_losses_finite_and_non_negative():
    g = torch.Generator().manual_seed(3)
    for _ in range(50):
        x_c, x_g = torch.randn(4, 5, generator=g), torch.randn(4, 5, generator=g)
        y = torch.where(torch.rand(4, generator=g) < 0.5, 1.0, -1.0)
        lf = loss_feat(torch.rand(4, generator=g), torch.rand(4, generator=g), x_c, x_g, y)
        lq = loss_qual(torch.rand(4, generator=g), 100 * torch.rand(4, generator=g),
                       torch.randint(0, 5, (4, 2, 2), generator=g).float(), 4 * torch.rand(4, 2, 2, generator=g))
        assert torch.isfinite(lf) and lf >= 0 and torch.isfinite(lq) and lq >= 0


class TestSchedule:
    def test_formula(self):
        assert poly_lr(1.0, 0, 10, 0.9) == 1.0
        assert poly_lr(2e-4, 5, 10, 0.9) == pytest.approx(2e-4 * 0.5**0.9, abs=1e-15)

    def test_optimizer_follows_formula(self):
        cfg = TrainConfig(lr=2e-4, power=0.9)
        model = torch.nn.Linear(2, 1)
        total = 17
        opt, sched = make_optimizer(model, cfg, total)
        assert isinstance(opt, torch.optim.Adam)
        assert opt.param_groups[0]["weight_decay"] == 5e-4
        for t in range(total):
            assert abs(opt.param_groups[0]["lr"] - poly_lr(cfg.lr, t, total, cfg.power)) <= 1e-9
            opt.step()
            sched.step()

    def test_config_validation(self):
        with pytest.raises(TrainError):
            TrainConfig(epochs_finetune=0)
        with pytest.raises(TrainError):
            LossWeights(lambda1=-1)


# ---------------------------------------------------------------------------
# Training loops at a small scale

SIZE, PATCH = (96, 96), 12


def small_model(seed=0, **kw):
    cfg = ModelConfig.for_input(SIZE, PATCH, channels_c=64, attention_dim=32, regional_hidden=128, **kw)
    return build_model(cfg, seed)


@pytest.fixture(scope="module")
def prints():
    return synth_dataset(50, 1, 1, 1.0, seed=11, size=SIZE, modality="fingerprint", prefix="p")


@pytest.fixture(scope="module")
def photo_set():
    samples = synth_dataset(5, 1, 3, 1.0, seed=12, size=SIZE)
    return samples, run_labeling(samples, PATCH, seed=12)


class TestPretrain:
    def test_overfits_fifty_samples(self, prints, tmp_path):
        cfg = TrainConfig(lr=1e-3, epochs_pretrain=50, batch_size=50, seed=0)
        res = pretrain(small_model(), prints, lq_ratio_oracle(PATCH), cfg, checkpoint_path=tmp_path / "p.pt")
        assert len(res.losses) == 50
        assert res.losses[-1] < 0.25 * res.losses[0]
        ckpt = load_checkpoint(res.checkpoint)
        assert ckpt.stage == "pretrain"
        probe = to_tensor([p.image for p in prints[:4]])
        assert torch.equal(ckpt.model.score_images(probe), res.model.score_images(probe))

    def test_deterministic_loss_curve(self, prints):
        cfg = TrainConfig(lr=1e-3, epochs_pretrain=3, batch_size=20, seed=4)
        a = pretrain(small_model(4), prints[:30], lq_ratio_oracle(PATCH), cfg, augment_copies=1)
        b = pretrain(small_model(4), prints[:30], lq_ratio_oracle(PATCH), cfg, augment_copies=1)
        assert a.losses == b.losses

    def test_empty(self):
        with pytest.raises(TrainError):
            pretrain(small_model(), [], lq_ratio_oracle(PATCH))

    def test_oracle_out_of_range(self, prints):
        with pytest.raises(TrainError, match="outside"):
            pretrain(small_model(), prints[:2], lambda r: 140.0, TrainConfig(epochs_pretrain=1))

    def test_csv_oracle(self, prints, tmp_path):
        path = tmp_path / "nfiq.csv"
        path.write_text("sample_id,score\n" + "".join(f"{p.sample_id},{i}\n" for i, p in enumerate(prints[:3])))
        oracle = csv_oracle(path)
        assert oracle(prints[2]) == 2.0
        with pytest.raises(TrainError):
            oracle(prints[5])


class TestFinetune:
    def test_runs_and_logs(self, photo_set, tmp_path):
        samples, art = photo_set
        cfg = TrainConfig(lr=1e-3, epochs_finetune=2, batch_size=8, seed=0)
        res = finetune(small_model(), samples, art.labels, art.maps, art.pairs, art.tables, cfg,
                       checkpoint_path=tmp_path / "f.pt", extra_meta={"ablation": "none"})
        steps = math.ceil(len(art.pairs.labelled()) / 8)
        assert len(res.lrs) == 2 * steps
        assert res.lrs[-1] == pytest.approx(poly_lr(1e-3, 2 * steps - 1, 2 * steps, 0.9), abs=1e-9)
        assert all(row["loss_feat"] > 0 for row in res.history)
        write_log(tmp_path / "log.csv", res.history)
        assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,loss_feat,loss_qual,loss_total,lr"
        assert read_log(tmp_path / "log.csv") == res.history
        assert load_checkpoint(res.checkpoint).extra["ablation"] == "none"

    def test_deterministic(self, photo_set):
        samples, art = photo_set
        cfg = TrainConfig(lr=1e-3, epochs_finetune=2, batch_size=8, seed=3)
        runs = [finetune(small_model(3), samples, art.labels, art.maps, art.pairs, art.tables, cfg).losses
                for _ in range(2)]
        assert runs[0] == runs[1]

    def test_no_fusion_skips_feature_loss(self, photo_set):
        samples, art = photo_set
        cfg = TrainConfig(lr=1e-3, epochs_finetune=8, batch_size=16, seed=0)
        res = finetune(small_model(use_fusion=False), samples, art.labels, art.maps, art.pairs, art.tables, cfg)
        assert all(row["loss_feat"] == 0.0 for row in res.history)
        assert res.losses[-1] < res.losses[0]

    def test_gallery_path_untouched_by_quality_loss(self, photo_set):
        samples, art = photo_set
        model = small_model()
        out = model(to_tensor([samples[0].image, samples[1].image]), to_tensor([samples[2].image, samples[3].image]))
        loss_qual(T([0.5, 0.5]), out["quality"], torch.ones(2, 8, 8), out["qmap"]).backward()
        assert all(p.grad is None for p in model.gallery_encoder.parameters())
        assert all(p.grad is None for p in model.fusion.parameters())

    def test_missing_label_names_sample(self, photo_set):
        samples, art = photo_set
        victim = art.labels[0].sample_id
        with pytest.raises(TrainError, match=victim):
            finetune(small_model(), samples, art.labels[1:], art.maps, art.pairs, art.tables,
                     TrainConfig(epochs_finetune=1))

    def test_missing_map_names_sample(self, photo_set):
        samples, art = photo_set
        victim = sorted(art.maps)[0]
        maps = {k: v for k, v in art.maps.items() if k != victim}
        with pytest.raises(TrainError, match=victim):
            finetune(small_model(), samples, art.labels, maps, art.pairs, art.tables, TrainConfig(epochs_finetune=1))

    def test_missing_score_names_pair(self, photo_set):
        samples, art = photo_set
        c, g = art.pairs.genuine[0]
        tables = [type(t)(t.matcher_id, [e for e in t.entries if (e.probe_id, e.gallery_id) != (c, g)])
                  for t in art.tables]
        with pytest.raises(TrainError, match=c):
            finetune(small_model(), samples, art.labels, art.maps, art.pairs, tables, TrainConfig(epochs_finetune=1))


def test_held_out_spearman_baseline():
    # recorded regression baseline at desk scale: ~0.78 on seed 0
    from desk import desk_run

    assert desk_run(0).spearman["full"] > 0.6

import math

import numpy as np
import pytest
import torch

from pros.backbone import BackboneConfig
from pros.caps import CaPSConfig
from pros.errors import ConfigError, PreconditionError
from pros.protocol import (ClassPartition, SyntheticDataConfig, build_split,
                           generate_synthetic_dataset)
from pros.training import (TrainConfig, align_loss, build_caption_bank, build_model,
                           cosine_lr, csl_step, load_checkpoint, pul_step,
                           save_checkpoint, stage_parameters, train_stage)


def tiny_world(seed=0, num_classes=6, samples_per_pair=4, num_val=1):
    data_cfg = SyntheticDataConfig(seed=seed, num_domains=3, num_classes=num_classes,
                                   samples_per_pair=samples_per_pair, num_patches=4,
                                   patch_dim=16, class_dim=8)
    manifest, gen = generate_synthetic_dataset(data_cfg)
    names = manifest.classes
    partition = ClassPartition(train=tuple(names[:num_classes - 2 - num_val]),
                               val=tuple(names[num_classes - 2 - num_val:num_classes - 2]),
                               test=tuple(names[-2:]))
    split = build_split(manifest, "UCDR", "styled2", partition, seed=seed)
    backbone_cfg = BackboneConfig(embed_dim=32, text_dim=32, proj_dim=16, num_patches=4,
                                  patch_dim=16, num_heads=4, seed=seed)
    caps_cfg = CaPSConfig(width=32, num_heads=4, seed=seed + 1)
    model = build_model(backbone_cfg, caps_cfg, ["real", "styled1"],
                        list(partition.train), text_prompt_len=4, prompt_seed=seed)
    load = lambda it: gen.render_source(it.source)
    return model, split, load


def batch_of(model, split, load, n=4):
    items = split.train_items[:n]
    grids = torch.from_numpy(np.stack([load(it) for it in items]))
    d_idx = torch.tensor([model.domain_index(it.domain) for it in items])
    c_idx = torch.tensor([model.class_index(it.class_name) for it in items])
    return grids, d_idx, c_idx


def snapshot(model):
    state = {f"bank.{k}": v.detach().clone() for k, v in model.bank.state_dict().items()}
    state.update({f"caps.{k}": v.detach().clone()
                  for k, v in model.simulator.state_dict().items()})
    state.update({f"backbone.{k}": v.detach().clone()
                  for k, v in model.backbone.state_dict().items()})
    return state


class TestCaptionBank:
    def test_cardinality_and_norms(self):
        model, _, _ = tiny_world()
        bank = build_caption_bank(model.backbone, ["a", "b", "c", "d"],
                                  model.bank.text_prompt)
        assert bank.shape[0] == 4
        assert torch.allclose(bank.norm(dim=-1), torch.ones(4), atol=1e-6)

    def test_deterministic_given_prompts(self):
        model, _, _ = tiny_world()
        a = build_caption_bank(model.backbone, ["x", "y"], model.bank.text_prompt)
        b = build_caption_bank(model.backbone, ["x", "y"], model.bank.text_prompt)
        assert torch.equal(a, b)

    def test_prompt_perturbation_changes_bank(self):
        model, _, _ = tiny_world()
        base = build_caption_bank(model.backbone, ["x", "y"], model.bank.text_prompt)
        nudged = build_caption_bank(model.backbone, ["x", "y"],
                                    model.bank.text_prompt + 0.05)
        assert (base - nudged).abs().max() > 0

    def test_duplicate_names_rejected(self):
        model, _, _ = tiny_world()
        with pytest.raises(PreconditionError):
            build_caption_bank(model.backbone, ["x", "x"], model.bank.text_prompt)


class TestAlignLoss:
    def test_hand_computed_softmax(self):
        # matching feature, two orthogonal distractors, tau=1
        bank = torch.eye(3)
        loss = align_loss(bank[0], bank, 0, tau=1.0)
        expected = -math.log(math.e / (math.e + 2))
        assert float(loss) == pytest.approx(expected, abs=1e-6)

    def test_uniform_cosines_give_log_c(self):
        bank = torch.eye(4)
        f = torch.ones(4)  # equal cosine with every anchor
        assert float(align_loss(f, bank, 1, tau=0.5)) == pytest.approx(math.log(4))

    def test_scale_invariance(self):
        g = torch.Generator().manual_seed(0)
        f = torch.randn(8, generator=g)
        bank = torch.randn(5, 8, generator=g)
        a = align_loss(f, bank, 2, tau=0.1)
        b = align_loss(3.0 * f, 7.0 * bank, 2, tau=0.1)
        assert float(a) == pytest.approx(float(b), rel=1e-5)

    def test_nonnegative_and_finite(self):
        g = torch.Generator().manual_seed(1)
        loss = align_loss(torch.randn(4, 8, generator=g), torch.randn(3, 8, generator=g),
                          [0, 1, 2, 0], tau=0.05)
        assert float(loss) >= 0 and math.isfinite(float(loss))

    def test_invalid_tau_rejected(self):
        with pytest.raises(PreconditionError):
            align_loss(torch.ones(4), torch.eye(4), 0, tau=0.0)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(PreconditionError):
            align_loss(torch.ones(4), torch.eye(4), 7, tau=1.0)


class TestTrainConfig:
    def test_defaults_match_contract(self):
        cfg = TrainConfig()
        assert cfg.epochs == 10 and cfg.early_stop_patience == 2
        assert cfg.batch_size == 50 and cfg.lr == 1e-3
        assert cfg.lr_schedule == "cosine" and cfg.temperature == 0.01

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(stage="WARMUP")
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(temperature=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(lr_schedule="step")


class TestSteps:
    def test_zero_lr_step_is_identity(self):
        model, split, load = tiny_world()
        grids, d_idx, c_idx = batch_of(model, split, load)
        before = snapshot(model)
        opt = torch.optim.SGD(stage_parameters(model, "PUL"), lr=0.0)
        loss1 = pul_step(model, opt, grids, d_idx, c_idx)
        after = snapshot(model)
        assert all(torch.equal(before[k], after[k]) for k in before)
        opt2 = torch.optim.SGD(stage_parameters(model, "PUL"), lr=0.0)
        loss2 = pul_step(model, opt2, grids, d_idx, c_idx)
        assert loss1 == loss2

    def test_out_of_range_indices_rejected(self):
        model, split, load = tiny_world()
        grids, d_idx, c_idx = batch_of(model, split, load)
        opt = torch.optim.SGD(stage_parameters(model, "PUL"), lr=0.0)
        with pytest.raises(PreconditionError):
            pul_step(model, opt, grids, d_idx + 10, c_idx)
        with pytest.raises(PreconditionError):
            pul_step(model, opt, grids, d_idx, c_idx + 10)

    def test_csl_requires_stage1(self):
        model, split, load = tiny_world()
        grids, d_idx, c_idx = batch_of(model, split, load)
        bank = torch.eye(len(model.classes))
        opt = torch.optim.SGD(stage_parameters(model, "CSL"), lr=0.0)
        with pytest.raises(PreconditionError, match="stage-1"):
            csl_step(model, opt, grids, d_idx, c_idx, bank)

    def test_relevance_mask_drops_one_of_each(self):
        # sequence into the simulator loses exactly one domain and one
        # semantic unit per sample; observable through the mask flag
        model, split, load = tiny_world()
        model.stage1_complete = True
        grids, d_idx, c_idx = batch_of(model, split, load)
        with torch.no_grad():
            bank = build_caption_bank(model.backbone, model.classes,
                                      model.bank.text_prompt)
        from pros.training import csl_forward
        masked = csl_forward(model, grids, d_idx, c_idx, bank, use_mask=True)
        unmasked = csl_forward(model, grids, d_idx, c_idx, bank, use_mask=False)
        assert (masked - unmasked).abs() > 0

    def test_no_mask_flag_changes_trajectory(self):
        losses = {}
        for flags in ((), ("no_mask",)):
            model, split, load = tiny_world()
            model.ablation = set(flags)
            result = train_stage(model, TrainConfig(stage="PUL", epochs=1, batch_size=8),
                                 split, load)
            result = train_stage(model, TrainConfig(stage="CSL", epochs=1, batch_size=8),
                                 split, load)
            losses[flags] = result.log_lines[2]
        assert losses[()] != losses[("no_mask",)]


class TestTrainStage:
    def test_cosine_schedule_decays(self):
        assert cosine_lr(1e-3, 0, 10) == pytest.approx(1e-3)
        assert cosine_lr(1e-3, 9, 10) == pytest.approx(0.0, abs=1e-12)
        values = [cosine_lr(1e-3, e, 10) for e in range(10)]
        assert values == sorted(values, reverse=True)
        assert cosine_lr(1e-3, 0, 1) == 1e-3

    def test_patience_zero_stops_at_first_plateau(self):
        model, split, load = tiny_world()
        cfg = TrainConfig(stage="PUL", epochs=30, early_stop_patience=0, batch_size=8,
                          lr=0.0)  # zero lr: validation can never improve
        result = train_stage(model, cfg, split, load)
        assert len(result.val_maps) == 2  # epoch 0 sets best, epoch 1 stops

    def test_early_stop_restores_best_state(self):
        model, split, load = tiny_world()
        cfg = TrainConfig(stage="PUL", epochs=6, early_stop_patience=1, batch_size=8)
        result = train_stage(model, cfg, split, load)
        assert result.best_val_map == max(result.val_maps)
        assert result.val_maps[result.best_epoch] == result.best_val_map

    def test_empty_training_split_rejected(self):
        model, split, load = tiny_world()
        split.train_items = []
        with pytest.raises(PreconditionError):
            train_stage(model, TrainConfig(stage="PUL", epochs=1), split, load)

    def test_csl_stage_requires_stage1(self):
        model, split, load = tiny_world()
        with pytest.raises(PreconditionError):
            train_stage(model, TrainConfig(stage="CSL", epochs=1), split, load)

    def test_deterministic_loss_sequence(self):
        runs = []
        for _ in range(2):
            model, split, load = tiny_world()
            result = train_stage(model, TrainConfig(stage="PUL", epochs=2, batch_size=8),
                                 split, load)
            train_stage(model, TrainConfig(stage="CSL", epochs=2, batch_size=8),
                        split, load)
            runs.append(result.log_lines)
        assert runs[0] == runs[1]

    def test_log_line_format(self):
        model, split, load = tiny_world()
        result = train_stage(model, TrainConfig(stage="PUL", epochs=1, batch_size=8),
                             split, load)
        fields = result.log_lines[0].split(", ")
        assert fields[0] == "0" and fields[2] == "PUL"
        assert float(fields[3]) >= 0

    def test_losses_finite_every_step(self):
        model, split, load = tiny_world()
        result = train_stage(model, TrainConfig(stage="PUL", epochs=2, batch_size=8),
                             split, load)
        for line in result.log_lines:
            if "val_map" not in line:
                assert math.isfinite(float(line.split(", ")[3]))

    def test_training_beats_untrained_validation(self):
        from pros import retrieval
        model, split, load = tiny_world(num_classes=8, samples_per_pair=10, num_val=3)
        def val_map(m):
            q = retrieval.extract_features(m.backbone, m.bank, m.simulator,
                                           split.val_queries, load, use_caps=False)
            g = retrieval.extract_features(m.backbone, m.bank, m.simulator,
                                           split.val_gallery, load, use_caps=False)
            return retrieval.evaluate_retrieval(q, g, map_k=200)["map_at_k"]
        untrained = val_map(model)
        train_stage(model, TrainConfig(stage="PUL", epochs=6, batch_size=16),
                    split, load)
        result = train_stage(model, TrainConfig(stage="CSL", epochs=6, batch_size=16),
                             split, load)
        assert result.best_val_map > untrained

    def test_stage_parameter_sets_disjoint(self):
        model, _, _ = tiny_world()
        pul = {id(p) for p in stage_parameters(model, "PUL")}
        csl = {id(p) for p in stage_parameters(model, "CSL")}
        assert not pul & csl

    def test_no_cls_train_excludes_cls(self):
        model, _, _ = tiny_world()
        model.ablation = {"no_cls_train"}
        assert id(model.bank.cls_token) not in {id(p) for p in stage_parameters(model, "PUL")}


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        model, split, load = tiny_world()
        train_stage(model, TrainConfig(stage="PUL", epochs=1, batch_size=8), split, load)
        path = tmp_path / "pul.ckpt"
        save_checkpoint(path, model, TrainConfig(stage="PUL", epochs=1),
                        metadata={"best_epoch": 0})
        loaded, payload = load_checkpoint(path)
        assert loaded.stage1_complete
        assert loaded.domains == model.domains and loaded.classes == model.classes
        assert loaded.tau == model.tau
        assert payload["metadata"]["best_epoch"] == 0
        for k, v in model.bank.state_dict().items():
            assert torch.equal(loaded.bank.state_dict()[k], v)
        for k, v in model.simulator.state_dict().items():
            assert torch.equal(loaded.simulator.state_dict()[k], v)

    def test_version_mismatch_rejected(self, tmp_path):
        model, _, _ = tiny_world()
        path = tmp_path / "bad.ckpt"
        save_checkpoint(path, model, TrainConfig(stage="PUL"))
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(PreconditionError, match="version"):
            load_checkpoint(path)

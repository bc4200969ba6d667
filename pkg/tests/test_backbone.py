import pytest
import torch

from pros.backbone import (BackboneConfig, PromptedSequence, SyntheticBackbone,
                           build_backbone, tokenize, SLOT_ID)
from pros.errors import ConfigError, NumericError, PreconditionError


def small_config(**kw):
    return BackboneConfig(**{"embed_dim": 32, "text_dim": 32, "proj_dim": 16,
                             "num_patches": 8, "patch_dim": 8, "num_heads": 4,
                             "seed": 0, **kw})


def grid(config, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(config.num_patches, config.patch_dim, generator=g)


class TestConfig:
    def test_rejects_nonpositive_dims(self):
        with pytest.raises(ConfigError):
            BackboneConfig(embed_dim=0)
        with pytest.raises(ConfigError):
            BackboneConfig(proj_dim=-1)
        with pytest.raises(ConfigError):
            BackboneConfig(num_layers=0)

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigError):
            BackboneConfig(embed_dim=30, num_heads=4)

    def test_unknown_backend_rejected(self):
        with pytest.raises(ConfigError):
            build_backbone(small_config(), backend="does-not-exist")


class TestEmbedPatches:
    def test_zero_image_gives_bias_terms_and_repeats(self):
        bb = SyntheticBackbone(small_config())
        zero = torch.zeros(8, 8)
        tokens = bb.embed_patches(zero)
        # a zero grid passes nothing through the projection weights
        expected = bb.patch_proj.bias.unsqueeze(0) + bb.pos_embed
        assert torch.equal(tokens, expected)
        assert torch.equal(tokens, bb.embed_patches(zero))

    def test_same_seed_instances_bit_identical(self):
        cfg = small_config(seed=7)
        a, b = SyntheticBackbone(cfg), SyntheticBackbone(small_config(seed=7))
        x = grid(cfg, seed=3)
        assert torch.equal(a.embed_patches(x), b.embed_patches(x))

    def test_different_seeds_differ(self):
        x = grid(small_config(), seed=3)
        a = SyntheticBackbone(small_config(seed=1))
        b = SyntheticBackbone(small_config(seed=2))
        assert not torch.equal(a.embed_patches(x), b.embed_patches(x))

    def test_shape_mismatch_reports_dims(self):
        bb = SyntheticBackbone(small_config())
        with pytest.raises(PreconditionError, match=r"8, 8"):
            bb.embed_patches(torch.zeros(4, 8))


class TestForwardImage:
    def test_empty_prompts_is_plain_forward(self):
        bb = SyntheticBackbone(small_config())
        patches = bb.embed_patches(grid(small_config()))
        seq = PromptedSequence(cls=bb.cls_init.detach(), prompts=patches[:0],
                               patches=patches)
        out = bb.forward_image(seq)
        assert out.shape == (16,)
        assert torch.isfinite(out).all()

    def test_patch_permutation_invariant_without_positions(self):
        cfg = small_config(use_positional=False)
        bb = SyntheticBackbone(cfg)
        patches = bb.embed_patches(grid(cfg))
        perm = torch.randperm(patches.shape[0], generator=torch.Generator().manual_seed(0))
        base = PromptedSequence(cls=bb.cls_init.detach(), prompts=patches[:0], patches=patches)
        shuffled = PromptedSequence(cls=bb.cls_init.detach(), prompts=patches[:0],
                                    patches=patches[perm])
        assert torch.allclose(bb.forward_image(base), bb.forward_image(shuffled), atol=1e-5)

    def test_zero_prompt_token_still_changes_output(self):
        # attention renormalizes over the longer sequence
        bb = SyntheticBackbone(small_config())
        patches = bb.embed_patches(grid(small_config()))
        cls = bb.cls_init.detach()
        without = bb.forward_image(PromptedSequence(cls=cls, prompts=patches[:0],
                                                    patches=patches))
        with_zero = bb.forward_image(PromptedSequence(cls=cls, prompts=torch.zeros(1, 32),
                                                      patches=patches))
        assert (without - with_zero).abs().max() > 0

    def test_output_width_independent_of_prompt_count(self):
        bb = SyntheticBackbone(small_config())
        patches = bb.embed_patches(grid(small_config()))
        cls = bb.cls_init.detach()
        for n in (0, 1, 3):
            out = bb.forward_image(PromptedSequence(cls=cls, prompts=torch.zeros(n, 32),
                                                    patches=patches))
            assert out.shape == (16,)

    def test_batched_matches_unbatched(self):
        bb = SyntheticBackbone(small_config())
        patches = bb.embed_patches(torch.stack([grid(small_config(), s) for s in (0, 1)]))
        cls = bb.cls_init.detach().expand(2, -1)
        batched = bb.forward_image(PromptedSequence(cls=cls, prompts=patches[:, :0],
                                                    patches=patches))
        for i in range(2):
            single = bb.forward_image(PromptedSequence(cls=cls[i], prompts=patches[i, :0],
                                                       patches=patches[i]))
            assert torch.allclose(batched[i], single, atol=1e-6)

    def test_nonfinite_aborts_with_layer_index(self):
        bb = SyntheticBackbone(small_config())
        patches = bb.embed_patches(grid(small_config()))
        bad = torch.full((1, 32), float("inf"))
        seq = PromptedSequence(cls=bb.cls_init.detach(), prompts=bad, patches=patches)
        with pytest.raises(NumericError, match="layer 0"):
            bb.forward_image(seq)

    def test_wrong_token_width_rejected(self):
        bb = SyntheticBackbone(small_config())
        seq = PromptedSequence(cls=torch.zeros(16), prompts=torch.zeros(0, 16),
                               patches=torch.zeros(8, 16))
        with pytest.raises(PreconditionError):
            bb.forward_image(seq)

    def test_weights_are_frozen(self):
        bb = SyntheticBackbone(small_config())
        assert all(not p.requires_grad for p in bb.parameters())


class TestEncodeText:
    def test_repeated_calls_identical(self):
        bb = SyntheticBackbone(small_config())
        ids = tokenize("a photo of cat from <P> domain .", 512)
        prompts = torch.randn(4, 32, generator=torch.Generator().manual_seed(0))
        assert torch.equal(bb.encode_text(ids, prompts), bb.encode_text(ids, prompts))

    def test_distinct_classes_not_collinear(self):
        bb = SyntheticBackbone(small_config())
        zeros = torch.zeros(4, 32)
        a = bb.encode_text(tokenize("a photo of cat from <P> domain .", 512), zeros)
        b = bb.encode_text(tokenize("a photo of dog from <P> domain .", 512), zeros)
        cos = torch.dot(a, b) / (a.norm() * b.norm())
        assert cos < 1.0

    def test_splice_adds_exactly_prompt_len_tokens(self):
        # raw template: 7 words incl. the slot -> 1 BOS + 6 ids + 16 prompts = 23
        ids = tokenize("a photo of cat from <P> domain .", 512)
        raw_len = 1 + sum(1 for t in ids if t != SLOT_ID)
        cfg = small_config(context_length=raw_len + 16)
        bb = SyntheticBackbone(cfg)
        bb.encode_text(ids, torch.zeros(16, 32))  # fits exactly
        with pytest.raises(PreconditionError, match="context length"):
            bb.encode_text(ids, torch.zeros(17, 32))

    def test_slot_without_prompts_rejected(self):
        bb = SyntheticBackbone(small_config())
        with pytest.raises(PreconditionError):
            bb.encode_text(tokenize("from <P> domain", 512), None)

    def test_wrong_prompt_width_rejected(self):
        bb = SyntheticBackbone(small_config())
        with pytest.raises(PreconditionError):
            bb.encode_text(tokenize("a <P> b", 512), torch.zeros(2, 16))

    def test_output_in_joint_space(self):
        bb = SyntheticBackbone(small_config())
        out = bb.encode_text(tokenize("hello world", 512))
        assert out.shape == (16,)


class TestTokenize:
    def test_slot_sentinel(self):
        assert tokenize("<P>", 512) == [SLOT_ID]

    def test_deterministic_and_case_folded(self):
        assert tokenize("Cat dog", 512) == tokenize("cat DOG", 512)

    def test_ids_in_vocab_range(self):
        ids = tokenize("the quick brown fox", 128)
        assert all(1 <= t < 128 for t in ids)

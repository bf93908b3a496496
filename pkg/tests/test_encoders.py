import numpy as np
import pytest
import torch

from trajdiff.encoders import (
    DenseImageEncoder,
    Instruction,
    PatchImageEncoder,
    TextEncoder,
    concat_text,
    encode_text_a,
    encode_text_b,
)
from trajdiff.errors import BadDims, EmptyText, TagMismatch
from trajdiff.simbench import tasks

D_A, D_B = 32, 16


def make_encoders(seed=0):
    gen = torch.Generator().manual_seed(seed)
    a = TextEncoder(D_A, "A", gen)
    b = TextEncoder(D_B, "B", gen, privileged_verb=True)
    return a, b


def instr(template_id="push_left", color="red", text=None):
    slots = {"color": color} if template_id != "press_button" else {}
    if template_id == "move_slider":
        slots = {"direction": "left"}
    text = text or tasks.TEMPLATES[template_id].phrasings[0].format(**slots)
    return Instruction(text, template_id, slots)


class TestTextEncoders:
    def test_deterministic(self):
        a, _ = make_encoders()
        i = instr()
        np.testing.assert_array_equal(
            encode_text_a(i, a).values.detach(), encode_text_a(i, a).values.detach()
        )

    def test_dims_and_finiteness(self):
        a, b = make_encoders()
        ea = encode_text_a(instr(), a)
        eb = encode_text_b(instr(), b)
        assert ea.dim == D_A and eb.dim == D_B
        assert torch.isfinite(ea.values).all() and torch.isfinite(eb.values).all()

    def test_empty_text(self):
        with pytest.raises(EmptyText):
            Instruction("  ", "push_left", {"color": "red"})

    def test_verb_swap_changes_b_not_a(self):
        # Counterfactual pair: identical surface text, different verb slot.
        a, b = make_encoders()
        text = "push the red block to the left"
        i_push = Instruction(text, "push_left", {"color": "red"})
        i_lift = Instruction(text, "lift", {"color": "red"})
        ea1 = encode_text_a(i_push, a).values.detach()
        ea2 = encode_text_a(i_lift, a).values.detach()
        eb1 = encode_text_b(i_push, b).values.detach()
        eb2 = encode_text_b(i_lift, b).values.detach()
        np.testing.assert_array_equal(ea1, ea2)
        assert float((eb1 - eb2).norm()) > 0.0

    def test_concat_order_and_dims(self):
        a, b = make_encoders()
        ea, eb = encode_text_a(instr(), a), encode_text_b(instr(), b)
        cat = concat_text(ea, eb)
        assert cat.tag == "A+B"
        assert cat.dim == D_A + D_B
        np.testing.assert_array_equal(cat.values[:D_A].detach(), ea.values.detach())
        np.testing.assert_array_equal(cat.values[D_A:].detach(), eb.values.detach())

    def test_concat_tag_mismatch(self):
        a, b = make_encoders()
        ea, eb = encode_text_a(instr(), a), encode_text_b(instr(), b)
        with pytest.raises(TagMismatch):
            concat_text(eb, ea)
        with pytest.raises(TagMismatch):
            concat_text(ea, ea)

    def test_encoder_tag_guards(self):
        a, b = make_encoders()
        with pytest.raises(TagMismatch):
            encode_text_a(instr(), b)
        with pytest.raises(TagMismatch):
            encode_text_b(instr(), a)

    def test_independent_parameters(self):
        a, b = make_encoders()
        i = instr()
        before = encode_text_a(i, a).values.detach().clone()
        with torch.no_grad():
            for p in b.parameters():
                p.zero_()
        np.testing.assert_array_equal(encode_text_a(i, a).values.detach(), before)
        assert float(encode_text_b(i, b).values.detach().norm()) == 0.0

    def test_unknown_template_rejected(self):
        with pytest.raises(KeyError):
            Instruction("do something", "juggle", {})


class TestPatchEncoder:
    def test_constant_image_uniform_features(self):
        gen = torch.Generator().manual_seed(1)
        enc = PatchImageEncoder(d=8, patch=4, generator=gen)
        rgb = torch.full((16, 16, 3), 0.3)
        feats = enc(rgb).detach()
        assert feats.shape == (16, 16, 8)
        np.testing.assert_allclose(feats, feats[0, 0].expand(16, 16, 8), atol=0)

    def test_within_patch_replication_bitwise(self):
        gen = torch.Generator().manual_seed(2)
        enc = PatchImageEncoder(d=8, patch=4, generator=gen)
        rgb = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(3))
        feats = enc(rgb).detach()
        for du in range(4):
            for dv in range(4):
                np.testing.assert_array_equal(feats[du, dv], feats[0, 0])

    def test_bad_dims(self):
        gen = torch.Generator().manual_seed(4)
        enc = PatchImageEncoder(d=8, patch=4, generator=gen)
        with pytest.raises(BadDims):
            enc(torch.zeros(15, 16, 3))


class TestDenseEncoder:
    def test_output_dims(self):
        gen = torch.Generator().manual_seed(5)
        enc = DenseImageEncoder(d=8, generator=gen)
        feats = enc(torch.rand(12, 10, 3, generator=torch.Generator().manual_seed(6)))
        assert feats.shape == (12, 10, 8)

    def test_vertical_edge_separates_features(self):
        gen = torch.Generator().manual_seed(7)
        enc = DenseImageEncoder(d=8, generator=gen)
        rgb = torch.zeros(8, 8, 3)
        rgb[:, 4:] = torch.tensor([1.0, 0.0, 0.0])
        feats = enc(rgb).detach()
        assert float((feats[4, 2] - feats[4, 6]).norm()) > 0.0

    def test_patch_vs_dense_within_patch_variance(self):
        # Textured image: the patch backbone yields exactly zero within-patch
        # variance, the dense backbone strictly positive variance.
        gen = torch.Generator().manual_seed(8)
        patch = PatchImageEncoder(d=8, patch=4, generator=gen)
        dense = DenseImageEncoder(d=8, generator=gen)
        rgb = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(9))

        def within_patch_var(feats):
            tiles = feats.reshape(4, 4, 4, 4, 8).permute(0, 2, 1, 3, 4).reshape(16, 16, 8)
            return float(tiles.var(dim=1).mean())

        assert within_patch_var(patch(rgb).detach()) == 0.0
        assert within_patch_var(dense(rgb).detach()) > 0.0

    def test_shared_channel_count(self):
        gen = torch.Generator().manual_seed(10)
        patch = PatchImageEncoder(d=8, patch=4, generator=gen)
        dense = DenseImageEncoder(d=8, generator=gen)
        assert patch.d == dense.d

    def test_batched_forward(self):
        gen = torch.Generator().manual_seed(11)
        enc = DenseImageEncoder(d=8, generator=gen)
        batch = torch.rand(3, 8, 8, 3, generator=torch.Generator().manual_seed(12))
        out = enc(batch)
        assert out.shape == (3, 8, 8, 8)
        np.testing.assert_allclose(
            out[1].detach(), enc(batch[1]).detach(), atol=1e-6
        )


class TestVocabulary:
    def test_vocab_covers_all_phrasings(self):
        vocab = set(tasks.vocabulary())
        for tid in tasks.TEMPLATE_IDS:
            for slots in tasks.all_slot_fillings(tid):
                for p in tasks.TEMPLATES[tid].phrasings:
                    assert set(tasks.tokenize(p.format(**slots))) <= vocab

    def test_sample_and_phrase_deterministic(self):
        rng = np.random.default_rng(0)
        t = tasks.sample_task("push_left", rng)
        assert t.slots["color"] in tasks.TARGET_COLORS
        text = tasks.phrase_task(t, np.random.default_rng(1))
        assert t.slots["color"] in text

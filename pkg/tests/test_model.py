"""Model assembly: stage semantics, wiring order, round-trips, invariants."""

import numpy as np
import pytest

from framesynth import engine, posenc
from framesynth.attention import conv_self_attention, cross_attention
from framesynth.engine import tensor
from framesynth.model import (ModelConfig, SynthesisRequest, _heads_of,
                              build_parameters, decode, embed, encode, forward,
                              forward_training, init_queries, load_checkpoint,
                              request_from_sequence, save_checkpoint,
                              synthesize)

from oracles import finite_difference, max_rel_error


@pytest.fixture
def micro():
    cfg = ModelConfig.micro()
    return cfg, build_parameters(cfg, seed=5)


def rand_frames(rng, n, h=8, w=8):
    return rng.uniform(0.0, 1.0, (n, 3, h, w))


class TestConfig:
    def test_reference_matches_published_scale(self):
        cfg = ModelConfig.reference()
        assert (cfg.d_model, cfg.heads, cfg.layers) == (128, 4, 7)
        assert cfg.d_head == 32
        assert cfg.sffn1_down == (256, 512) and cfg.sffn2_down == (32, 64, 128, 256, 512)

    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=128, heads=3, layers=1)

    def test_head_sweep_at_divisible_width(self):
        for heads in (1, 2, 3, 4):
            cfg = ModelConfig(d_model=24, heads=heads, layers=1,
                              sffn1_down=(8, 8), sffn1_up=(8, 8), sffn1_head=(4,),
                              sffn2_down=(4, 4), sffn2_up=(4, 4))
            assert cfg.d_head * heads == 24

    def test_manifest_roundtrip(self):
        for cfg in (ModelConfig.reference(), ModelConfig.desk(), ModelConfig.micro(),
                    ModelConfig(d_model=8, heads=2, layers=0, posenc_mode="off",
                                residual=False, ff_layers=2, groups=4)):
            assert ModelConfig.from_manifest(cfg.to_manifest()) == cfg

    def test_parameter_count_matches_analytic_formula(self):
        cfg = ModelConfig.reference()
        store = build_parameters(cfg, seed=0)

        def conv_count(ic, oc, k):
            return oc * ic * k * k + oc

        d, dh = cfg.d_model, cfg.d_head
        expected = conv_count(3, d, 3) + (cfg.embed_layers - 1) * conv_count(d, d, 3)
        per_head = conv_count(d, dh, 3) + conv_count(d, 2 * dh, 3) + conv_count(2 * dh, 1, 3)
        enc_layer = cfg.heads * per_head + conv_count(d, d, 3) + 2 * (2 * d)
        dec_layer = 2 * cfg.heads * per_head + conv_count(d, d, 3) + 3 * (2 * d)
        expected += cfg.layers * (enc_layer + dec_layer)

        def stage_count(in_c, down, up, head):
            total, c = 0, in_c
            skips = []
            for b, width in enumerate(down):
                total += conv_count(c, width, 3) + conv_count(width, width, 3)
                if b < len(up):
                    skips.append(width)
                c = width
            for m, width in enumerate(up):
                total += conv_count(c + skips[len(up) - 1 - m], width, 3)
                total += conv_count(width, width, 3)
                c = width
            for width in head:
                total += conv_count(c, width, 3)
                c = width
            return total + conv_count(c, 3, 1)

        expected += stage_count(d, cfg.sffn1_down, cfg.sffn1_up, cfg.sffn1_head)
        expected += stage_count(3, cfg.sffn2_down, cfg.sffn2_up, cfg.sffn2_head)
        assert store.total_parameters() == expected


class TestEmbed:
    def test_identical_frames_identical_embeddings(self, micro):
        cfg, store = micro
        rng = np.random.default_rng(0)
        one = rand_frames(rng, 1)
        x = tensor(np.concatenate([one, one], axis=0))
        out = embed(x, store, cfg).data
        assert np.array_equal(out[0], out[1])

    def test_zero_weights_constant_output(self, micro):
        cfg, store = micro
        for name, t in store.items():
            if name.startswith("embed."):
                t.data = np.zeros_like(t.data)
        store["embed.3.bias"].data = np.full_like(store["embed.3.bias"].data, 0.7)
        out = embed(tensor(rand_frames(np.random.default_rng(1), 2)), store, cfg)
        assert np.all(out.data == 0.7)

    def test_non_rgb_rejected(self, micro):
        cfg, store = micro
        with pytest.raises(ValueError):
            embed(tensor(np.zeros((1, 4, 8, 8))), store, cfg)

    def test_gradient_through_embed(self, micro):
        cfg, store = micro
        rng = np.random.default_rng(2)
        x0 = rand_frames(rng, 1, 6, 6) + 0.05
        w = rng.standard_normal((1, cfg.d_model, 6, 6))
        arrays = [store[f"embed.{i}.kernel"].data.copy()
                  for i in range(cfg.embed_layers)]

        def loss_of(*kernels):
            for i, k in enumerate(kernels):
                store[f"embed.{i}.kernel"].data = k
            out = embed(tensor(x0), store, cfg)
            return float(np.sum(out.data * w))

        fd = finite_difference(loss_of, [a.copy() for a in arrays], eps=1e-6)
        for i, a in enumerate(arrays):
            store[f"embed.{i}.kernel"].data = a
        store.zero_grad()
        engine.sum_all(engine.mul(embed(tensor(x0), store, cfg), tensor(w))).backward()
        for i in range(cfg.embed_layers):
            assert max_rel_error(store[f"embed.{i}.kernel"].grad, fd[i]) < 1e-4


class TestEncode:
    def test_zero_layers_identity(self):
        cfg = ModelConfig(d_model=4, heads=2, layers=0,
                          sffn1_down=(4, 4), sffn1_up=(4, 4),
                          sffn2_down=(4, 4), sffn2_up=(4, 4))
        store = build_parameters(cfg, seed=1)
        z = tensor(np.random.default_rng(3).standard_normal((3, 4, 8, 8)))
        out = encode(z, [1.0, 2.0, 3.0], store, cfg)
        assert out is z

    def test_residual_off_zero_weights_gives_beta(self):
        cfg = ModelConfig(d_model=4, heads=2, layers=1, residual=False,
                          posenc_mode="off",
                          sffn1_down=(4, 4), sffn1_up=(4, 4),
                          sffn2_down=(4, 4), sffn2_up=(4, 4))
        store = build_parameters(cfg, seed=2)
        for name, t in store.items():
            if name.startswith("enc.") and name.endswith((".kernel", ".bias")):
                t.data = np.zeros_like(t.data)
        store["enc.0.norm2.beta"].data = np.full_like(
            store["enc.0.norm2.beta"].data, 2.5)
        z = tensor(np.random.default_rng(4).standard_normal((2, 4, 8, 8)))
        out = encode(z, [1.0, 2.0], store, cfg)
        assert np.all(out.data == 2.5)

    def test_posenc_off_permutation_equivariant_bitwise(self):
        cfg = ModelConfig.micro()
        cfg_off = ModelConfig(**{**cfg.__dict__, "posenc_mode": "off"})
        store = build_parameters(cfg_off, seed=5)
        rng = np.random.default_rng(6)
        frames = rand_frames(rng, 4)
        emb = embed(tensor(frames), store, cfg_off)
        base = encode(emb, [1.0, 2.0, 3.0, 4.0], store, cfg_off).data
        for _ in range(4):
            perm = rng.permutation(4)
            emb_p = embed(tensor(frames[perm]), store, cfg_off)
            out_p = encode(emb_p, [1.0, 2.0, 3.0, 4.0], store, cfg_off).data
            assert np.array_equal(base[perm], out_p)

    def test_posenc_on_not_equivariant(self, micro):
        cfg, store = micro
        rng = np.random.default_rng(7)
        frames = rand_frames(rng, 4)
        emb = embed(tensor(frames), store, cfg)
        base = encode(emb, [1.0, 2.0, 3.0, 4.0], store, cfg).data
        perm = np.array([3, 1, 0, 2])
        emb_p = embed(tensor(frames[perm]), store, cfg)
        out_p = encode(emb_p, [1.0, 2.0, 3.0, 4.0], store, cfg).data
        assert np.max(np.abs(base[perm] - out_p)) > 1e-6


class TestInitQueries:
    def test_extrapolation_copies_last_embedding(self, micro):
        cfg, store = micro
        rng = np.random.default_rng(8)
        frames = rand_frames(rng, 4)
        req = SynthesisRequest(mode="extrapolate", frames=frames,
                               positions=[1, 2, 3, 4], target_count=3)
        emb = embed(tensor(frames), store, cfg)
        q, qpos = init_queries(req, emb)
        assert q.shape[0] == 3
        for i in range(3):
            assert np.array_equal(q.data[i], emb.data[3])
        assert qpos == [5.0, 6.0, 7.0]

    def test_interpolation_averages_flanks(self, micro):
        cfg, store = micro
        rng = np.random.default_rng(9)
        frames = rand_frames(rng, 6)
        frames[3] = frames[2]  # equal flanking frames
        req = SynthesisRequest(mode="interpolate", frames=frames,
                               positions=[1, 2, 3, 5, 6, 7], target_count=3)
        emb = embed(tensor(frames), store, cfg)
        q, qpos = init_queries(req, emb)
        for i in range(3):
            assert np.max(np.abs(q.data[i] - emb.data[2])) < 1e-12
        assert qpos == [3.5, 4.0, 4.5]

    def test_interpolation_zero_flank_halves(self, micro):
        cfg, store = micro
        rng = np.random.default_rng(10)
        frames = rand_frames(rng, 6)
        req = SynthesisRequest(mode="interpolate", frames=frames,
                               positions=[1, 2, 3, 5, 6, 7], target_count=3)
        emb = embed(tensor(frames), store, cfg)
        zeroed = emb.data.copy()
        zeroed[2] = 0.0
        q, _ = init_queries(req, engine.tensor(zeroed))
        assert np.max(np.abs(q.data[0] - zeroed[3] / 2.0)) < 1e-15

    def test_mode_length_inconsistency_rejected(self):
        with pytest.raises(ValueError):
            SynthesisRequest(mode="extrapolate", frames=np.zeros((5, 3, 8, 8)),
                             positions=[1, 2, 3, 4, 5], target_count=1)
        with pytest.raises(ValueError):
            SynthesisRequest(mode="interpolate", frames=np.zeros((6, 3, 8, 8)),
                             positions=[1, 2, 3, 5, 6, 7], target_count=2)
        with pytest.raises(ValueError):
            SynthesisRequest(mode="extrapolate", frames=np.zeros((4, 3, 8, 8)),
                             positions=[1, 2, 3, 4], target_count=4)


class TestDecode:
    def test_zero_layers_identity(self):
        cfg = ModelConfig(d_model=4, heads=2, layers=0,
                          sffn1_down=(4, 4), sffn1_up=(4, 4),
                          sffn2_down=(4, 4), sffn2_up=(4, 4))
        store = build_parameters(cfg, seed=11)
        q = tensor(np.random.default_rng(12).standard_normal((2, 4, 8, 8)))
        mem = tensor(np.random.default_rng(13).standard_normal((4, 4, 8, 8)))
        out = decode(q, [5.0, 6.0], mem, store, cfg)
        assert out is q

    def test_single_layer_matches_straight_line_composition(self, micro):
        cfg, store = micro
        rng = np.random.default_rng(14)
        q = tensor(rng.standard_normal((1, 4, 8, 8)))
        mem = tensor(rng.standard_normal((2, 4, 8, 8)))
        qpos = [5.0]
        out = decode(q, qpos, mem, store, cfg).data

        # hand-unrolled decoder layer
        g = cfg.effective_groups
        x = posenc.add_positional(q, qpos)
        satt, _ = conv_self_attention(x, _heads_of(store, "dec.0.self", cfg))
        x = engine.group_norm(engine.add(x, satt), store["dec.0.norm1.gamma"],
                              store["dec.0.norm1.beta"], g)
        catt, _ = cross_attention(x, mem, _heads_of(store, "dec.0.cross", cfg))
        x = engine.group_norm(engine.add(x, catt), store["dec.0.norm2.gamma"],
                              store["dec.0.norm2.beta"], g)
        ff = engine.conv2d(x, store.conv("dec.0.ff0"))
        x = engine.group_norm(engine.add(x, ff), store["dec.0.norm3.gamma"],
                              store["dec.0.norm3.beta"], g)
        assert np.array_equal(out, x.data)


class TestSynthesize:
    def test_zero_weights_final_bias_constant_image(self, micro):
        cfg, store = micro
        for name, t in store.items():
            if name.startswith("sffn"):
                t.data = np.zeros_like(t.data)
        store["sffn2.out.bias"].data = np.array([0.2, 0.5, 0.8]).reshape(1, 3, 1, 1)
        decoded = tensor(np.random.default_rng(15).standard_normal((2, 4, 8, 8)))
        out = synthesize(decoded, store, cfg).data
        for c, v in enumerate([0.2, 0.5, 0.8]):
            assert np.allclose(out[:, c], v, atol=1e-15)

    def test_identical_decoded_maps_identical_frames(self, micro):
        cfg, store = micro
        one = np.random.default_rng(16).standard_normal((1, 4, 8, 8))
        out = synthesize(tensor(np.concatenate([one, one])), store, cfg).data
        assert np.array_equal(out[0], out[1])

    def test_divisibility_rejected_with_message(self, micro):
        cfg, store = micro
        with pytest.raises(ValueError) as err:
            synthesize(tensor(np.zeros((1, 4, 6, 6))), store, cfg)
        assert "divisible by 4" in str(err.value)

    def test_gradient_through_sffn_spot_check(self):
        cfg = ModelConfig.desk()
        store = build_parameters(cfg, seed=17)
        rng = np.random.default_rng(18)
        decoded0 = rng.standard_normal((1, cfg.d_model, 16, 16)) * 0.5
        target = rng.uniform(0, 1, (1, 3, 16, 16))

        store.zero_grad()
        pred = synthesize(tensor(decoded0), store, cfg)
        diff = engine.sub(pred, tensor(target))
        engine.mean_all(engine.mul(diff, diff)).backward()

        eps = 1e-5
        checked = 0
        for name in ("sffn1.down0.c0.kernel", "sffn1.up1.c1.kernel",
                     "sffn2.down1.c0.kernel", "sffn2.out.kernel",
                     "sffn1.out.bias"):
            t = store[name]
            flat = t.data.reshape(-1)
            gflat = t.grad.reshape(-1)
            for fi in rng.choice(t.numel(), size=3, replace=False):
                orig = flat[fi]

                def value():
                    p = synthesize(tensor(decoded0), store, cfg)
                    return float(np.mean((p.data - target) ** 2))

                flat[fi] = orig + eps
                fp = value()
                flat[fi] = orig - eps
                fm = value()
                flat[fi] = orig
                numeric = (fp - fm) / (2 * eps)
                denom = max(abs(numeric), abs(gflat[fi]), 1e-6)
                assert abs(numeric - gflat[fi]) / denom < 1e-4
                checked += 1
        assert checked == 15


class TestForward:
    def test_shape_contract_and_finiteness(self, micro):
        cfg, store = micro
        rng = np.random.default_rng(19)
        req = SynthesisRequest(mode="extrapolate", frames=rand_frames(rng, 4),
                               positions=[1, 2, 3, 4], target_count=3)
        seq = forward(req, store, cfg)
        assert seq.frames.shape == (3, 3, 8, 8)
        assert np.all(np.isfinite(seq.frames))
        assert seq.frames.min() >= 0.0 and seq.frames.max() <= 1.0

    def test_bitwise_deterministic(self, micro):
        cfg, store = micro
        rng = np.random.default_rng(20)
        req = SynthesisRequest(mode="extrapolate", frames=rand_frames(rng, 4),
                               positions=[1, 2, 3, 4], target_count=2)
        a = forward(req, store, cfg)
        b = forward(req, store, cfg)
        assert np.array_equal(a.frames, b.frames)

    def test_order_sensitivity_with_posenc(self, micro):
        cfg, store = micro
        rng = np.random.default_rng(21)
        frames = rand_frames(rng, 4)
        req_f = SynthesisRequest(mode="extrapolate", frames=frames,
                                 positions=[1, 2, 3, 4], target_count=1)
        req_r = SynthesisRequest(mode="extrapolate", frames=frames[::-1].copy(),
                                 positions=[1, 2, 3, 4], target_count=1)
        pred_f, _ = forward_training(req_f, store, cfg)
        pred_r, _ = forward_training(req_r, store, cfg)
        assert np.max(np.abs(pred_f.data - pred_r.data)) > 1e-6

    def test_parallel_matches_serial_bitwise(self, micro):
        cfg, store = micro
        rng = np.random.default_rng(22)
        req = SynthesisRequest(mode="extrapolate", frames=rand_frames(rng, 4),
                               positions=[1, 2, 3, 4], target_count=2)
        serial = forward(req, store, cfg, parallel=False)
        threaded = forward(req, store, cfg, parallel=True)
        assert np.array_equal(serial.frames, threaded.frames)

    def test_attention_collection_structure(self, micro):
        cfg, store = micro
        rng = np.random.default_rng(23)
        req = SynthesisRequest(mode="extrapolate", frames=rand_frames(rng, 4),
                               positions=[1, 2, 3, 4], target_count=2)
        _, sink = forward(req, store, cfg, collect_attention=True)
        assert len(sink["encoder"]) == cfg.layers
        assert len(sink["decoder_cross"]) == cfg.layers
        assert len(sink["encoder"][0]) == cfg.heads
        assert sink["encoder"][0][0].values.shape == (4, 4, 8, 8)
        assert sink["decoder_cross"][0][0].values.shape == (2, 4, 8, 8)
        assert sink["decoder_self"][0][0].values.shape == (2, 2, 8, 8)

    def test_posenc_modes_distinct_with_two_layers(self):
        # once/per_layer only diverge from the second layer on
        base = ModelConfig(**{**ModelConfig.micro().__dict__, "layers": 2})
        store = build_parameters(base, seed=24)
        rng = np.random.default_rng(24)
        req = SynthesisRequest(mode="extrapolate", frames=rand_frames(rng, 4),
                               positions=[1, 2, 3, 4], target_count=1)
        preds = {}
        for mode in ("off", "once", "per_layer"):
            cfg_m = ModelConfig(**{**base.__dict__, "posenc_mode": mode})
            preds[mode] = forward(req, store, cfg_m).frames
        assert np.max(np.abs(preds["off"] - preds["once"])) > 1e-9
        assert np.max(np.abs(preds["once"] - preds["per_layer"])) > 1e-9


class TestRequestFromSequence:
    def test_extrapolation_split(self):
        from framesynth.synthdata import FrameSequence
        frames = np.random.default_rng(25).uniform(0, 1, (6, 3, 8, 8))
        seq = FrameSequence(frames=frames, positions=[1, 2, 3, 4, 5, 6])
        req, targets, tpos = request_from_sequence(seq, "extrapolate", 2)
        assert req.frames.shape[0] == 4
        assert np.array_equal(targets, frames[4:6])
        assert tpos == [5, 6]

    def test_interpolation_split(self):
        from framesynth.synthdata import FrameSequence
        frames = np.random.default_rng(26).uniform(0, 1, (9, 3, 8, 8))
        pos = [1, 2, 3, 3.5, 4, 4.5, 5, 6, 7]
        seq = FrameSequence(frames=frames, positions=pos)
        req, targets, tpos = request_from_sequence(seq, "interpolate")
        assert list(req.positions) == [1, 2, 3, 5, 6, 7]
        assert np.array_equal(targets, frames[3:6])
        assert tpos == [3.5, 4, 4.5]

    def test_too_few_frames_rejected(self):
        from framesynth.synthdata import FrameSequence
        seq = FrameSequence(frames=np.zeros((4, 3, 8, 8)), positions=[1, 2, 3, 4])
        with pytest.raises(ValueError):
            request_from_sequence(seq, "extrapolate", 1)


class TestCheckpoint:
    def test_roundtrip_bitwise_at_float32(self, micro, tmp_path):
        cfg, store = micro
        engine.set_default_dtype(np.float32)
        try:
            store32 = build_parameters(cfg, seed=30)
            path = tmp_path / "model.cvtx"
            save_checkpoint(path, store32, cfg)
            cfg2, loaded = load_checkpoint(path)
            assert cfg2 == cfg
            for name, t in store32.items():
                assert np.array_equal(loaded[name].data, t.data), name
        finally:
            engine.set_default_dtype(np.float64)

    def test_double_save_identical_bytes(self, micro, tmp_path):
        cfg, store = micro
        p1, p2 = tmp_path / "a.cvtx", tmp_path / "b.cvtx"
        save_checkpoint(p1, store, cfg)
        cfg2, loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded, cfg2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_and_container_layout(self, micro, tmp_path):
        cfg, store = micro
        path = tmp_path / "model.cvtx"
        save_checkpoint(path, store, cfg)
        blob = path.read_bytes()
        assert blob[:5] == b"CVTX1"
        import struct
        (mlen,) = struct.unpack("<I", blob[5:9])
        manifest = blob[9:9 + mlen].decode()
        assert "d_model=4" in manifest

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.cvtx"
        path.write_bytes(b"NOPE!" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(path)

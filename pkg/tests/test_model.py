import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcnet.anchors import ExtractorParams, make_layout
from tcnet.model import (
    Classifier,
    CompactConfig,
    CompactEncoder,
    FreqBranch,
    GroupProjection,
    ModelConfig,
    PretextHeads,
    TCNet,
    TimeBranch,
    ViewGroupAttention,
    forward,
    forward_compact,
    load_checkpoint,
    log_spectrogram,
    n_blocks,
    pool_blocks,
    projection_widths,
    save_checkpoint,
    unfold_blocks,
)
from tcnet.nn import ScoreAttention
from tcnet.tensor import Tensor, grad_check, ops, param_grad_check
from tcnet.training import total_loss

RNG = np.random.default_rng


def tiny(**over):
    base = dict(n_channels=3, length=64, n_classes=3, block_sizes=(32,), n_views=2, d_proj=16, d_ctx=16,
                d_block=8, time_kernels=(3, 5), time_filters=4, fft_sizes=(16, 32), freq_channels=2,
                mixer_width=8, sampling_rate=50.0)
    base.update(over)
    return ModelConfig(**base)


# -- blocking ----------------------------------------------------------------

class TestBlocking:
    @pytest.mark.parametrize("L,m,s,n", [(128, 32, 32, 4), (200, 50, 50, 4), (200, 100, 100, 2), (192, 192, 192, 1)])
    def test_counts(self, L, m, s, n):
        assert n_blocks(L, m, s) == n

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(1, 300), st.data())
    def test_count_matches_enumeration(self, L, data):
        m = data.draw(st.integers(1, L))
        s = data.draw(st.integers(1, L))
        enumerated = sum(1 for start in range(L) if start % s == 0 and start + m <= L)
        assert n_blocks(L, m, s) == enumerated

    def test_block_contents(self):
        x = np.arange(2 * 3 * 20, dtype=float).reshape(2, 3, 20)
        blocks = unfold_blocks(x, 8, 5).data
        assert blocks.shape == (2, 3, 8, 3)
        for n in range(3):
            np.testing.assert_array_equal(blocks[:, n], np.swapaxes(x[:, :, 5 * n:5 * n + 8], 1, 2))

    def test_oversized_block(self):
        with pytest.raises(ValueError, match="exceeds"):
            unfold_blocks(np.zeros((1, 1, 10)), 11, 1)
        with pytest.raises(ValueError, match="exceeds"):
            tiny(block_sizes=(65,))


# -- config ------------------------------------------------------------------

class TestConfig:
    def test_default_groups_are_triples(self):
        cfg = ModelConfig(n_channels=9, length=128, n_classes=6, sampling_rate=50.0)
        assert cfg.sensor_groups == ((0, 1, 2), (3, 4, 5), (6, 7, 8))
        assert cfg.strides == (32, 128)

    def test_bad_groups(self):
        with pytest.raises(ValueError, match="partition"):
            tiny(sensor_groups=((0, 1), (1, 2)))

    def test_effective_views(self):
        assert tiny(n_views=4, disable_correction=True).effective_views == 1

    def test_fft_sizes(self):
        with pytest.raises(ValueError, match="skip_oversized_fft"):
            tiny(fft_sizes=(32, 128)).usable_fft_sizes()
        assert tiny(fft_sizes=(32, 128), skip_oversized_fft=True).usable_fft_sizes() == (32,)

    def test_json_round_trip(self):
        cfg = tiny(sensor_groups=((0,), (1, 2)))
        again = ModelConfig.from_json(cfg.to_json())
        assert again == cfg and again.digest() == cfg.digest()
        with pytest.raises(ValueError, match="unknown keys"):
            ModelConfig.from_json({**cfg.to_json(), "mystery": 1})


# -- context branches --------------------------------------------------------

class TestTimeBranch:
    def test_identical_windows(self):
        branch = TimeBranch(3, (5, 11, 21), 4, 8, RNG(0))
        x = RNG(1).normal(size=(1, 3, 64))
        out = branch(np.concatenate([x, x])).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_zero_weights(self):
        branch = TimeBranch(3, (5, 11), 4, 8, RNG(0))
        branch.mlp.second.bias.data[...] = np.linspace(-1, 1, 8)
        branch.zero_weights()
        out = branch(RNG(1).normal(size=(2, 3, 32))).data
        np.testing.assert_array_equal(out, np.broadcast_to(np.linspace(-1, 1, 8), (2, 8)))

    def test_short_window(self):
        with pytest.raises(ValueError, match="below kernel"):
            TimeBranch(3, (5, 21), 4, 8, RNG(0))(np.zeros((1, 3, 20)))

    def test_gradient(self):
        branch = TimeBranch(2, (3, 5), 3, 4, RNG(2))
        assert grad_check(lambda t: ops.sum(ops.tanh(branch(t))), RNG(3).normal(size=(1, 2, 12))) < 1e-4


class TestFreqBranch:
    def test_spectrogram_oracle(self):
        x = RNG(0).normal(size=(1, 2, 64))
        spec = log_spectrogram(x, 16).data
        win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(16) / 16)
        for t in range(7):
            frame = x[..., 8 * t:8 * t + 16] * win
            np.testing.assert_allclose(spec[:, :, t], np.log1p(np.abs(np.fft.rfft(frame)) ** 2), rtol=1e-10)
        assert spec.shape == (1, 2, 7, 9)

    def test_trailing_samples_dropped(self):
        assert log_spectrogram(np.ones((1, 1, 70)), 16).shape[2] == 7

    def test_zero_signal_gives_bias_cascade(self):
        branch = FreqBranch(3, 64, (16, 32), 2, 8, 8, RNG(0))
        assert np.all(log_spectrogram(np.zeros((1, 3, 64)), 16).data == 0)
        a = branch(np.zeros((1, 3, 64))).data
        # A zero spectrogram reaches the mixer as the mix bias alone, so any zero input agrees.
        b = branch(np.zeros((2, 3, 64))).data
        np.testing.assert_array_equal(a[0], b[1])
        branch.zero_weights()
        for stage in branch.stages:
            stage.head.second.bias.data[...] = 2.0
        np.testing.assert_array_equal(branch(np.zeros((1, 3, 64))).data, 2.0)

    def test_scaling_increases_spectrogram(self):
        x = RNG(1).normal(size=(1, 3, 64))
        small, large = log_spectrogram(x, 32).data, log_spectrogram(10 * x, 32).data
        nonzero = small > 0
        assert np.all(large[nonzero] > small[nonzero])

    def test_gradient(self):
        branch = FreqBranch(2, 32, (16,), 2, 4, 4, RNG(2))
        assert grad_check(lambda t: ops.sum(ops.tanh(branch(t))), RNG(3).normal(size=(1, 2, 32))) < 1e-4

    def test_short_window(self):
        with pytest.raises(ValueError, match="below FFT"):
            log_spectrogram(np.zeros((1, 1, 10)), 16)


# -- fusion ------------------------------------------------------------------

class TestProjection:
    def test_widths(self):
        assert projection_widths(128, 7) == [18] * 6 + [20]
        assert sum(projection_widths(16, 7)) == 16

    def test_zero_weights(self):
        layout = make_layout(ExtractorParams.default(), 32)
        proj = GroupProjection(layout, 128, RNG(0))
        for i, lin in enumerate(proj.maps):
            lin.bias.data[...] = i
        proj.zero_weights()
        out = proj(RNG(1).normal(size=(2, 3, layout.width))).data
        expect = np.concatenate([np.full(w, float(i)) for i, w in enumerate(projection_widths(128, 7))])
        np.testing.assert_array_equal(out, np.broadcast_to(expect, out.shape))

    def test_family_permutation(self):
        # Swap two equal-width families in the input and swap their weights: output unchanged.
        layout = make_layout(ExtractorParams.default(), 32)
        fams = {name: (start, stop) for name, start, stop in layout.families}
        (a0, a1), (b0, b1) = fams["crossing"], fams["quantiles"]
        assert a1 - a0 == b1 - b0
        proj = GroupProjection(layout, 128, RNG(0))
        z = RNG(1).normal(size=(2, layout.width))
        before = proj(z).data
        swapped = z.copy()
        swapped[:, a0:a1], swapped[:, b0:b1] = z[:, b0:b1], z[:, a0:a1]
        ia, ib = layout.names.index("crossing"), layout.names.index("quantiles")
        wa, wb = proj.maps[ia].weight.data.copy(), proj.maps[ib].weight.data.copy()
        proj.maps[ia].weight.data[...], proj.maps[ib].weight.data[...] = wb, wa
        after = proj(swapped).data
        widths = projection_widths(128, 7)
        start = np.cumsum([0] + widths)
        sa, sb = slice(start[ia], start[ia + 1]), slice(start[ib], start[ib + 1])
        np.testing.assert_allclose(after[:, sa] - proj.maps[ia].bias.data, before[:, sb] - proj.maps[ib].bias.data,
                                   rtol=1e-12, atol=1e-12)

    def test_layout_mismatch(self):
        layout = make_layout(ExtractorParams.default(), 32)
        with pytest.raises(ValueError, match="does not match layout"):
            GroupProjection(layout, 16, RNG(0))(np.zeros((1, 10)))


class TestAttention:
    def test_single_view_single_group_is_channel_mean(self):
        att = ViewGroupAttention(4, RNG(0))
        h = RNG(1).normal(size=(2, 3, 3, 4))
        out, vw, gw = att(h, ((0, 1, 2),), 1)
        np.testing.assert_allclose(out.data, h.mean(axis=2), rtol=1e-12)
        np.testing.assert_array_equal(vw.data, 1.0)
        np.testing.assert_array_equal(gw.data, 1.0)

    def test_identical_views(self):
        att = ViewGroupAttention(4, RNG(0))
        one = RNG(2).normal(size=(1, 2, 3, 4))
        out_multi = att(np.concatenate([one] * 3, axis=2), ((0,), (1, 2)), 3)[0].data
        out_single = att(one, ((0,), (1, 2)), 1)[0].data
        np.testing.assert_allclose(out_multi, out_single, rtol=1e-12, atol=1e-14)

    def test_score_shift_invariance(self):
        att = ScoreAttention(5, RNG(0))
        x = RNG(3).normal(size=(2, 4, 5))
        base, w0 = att(x, axis=1)
        att.score.bias.data += 7.3
        moved, w1 = att(x, axis=1)
        np.testing.assert_allclose(moved.data, base.data, rtol=1e-12)
        np.testing.assert_allclose(w1.data, w0.data, rtol=1e-12)

    def test_pool_single_block(self):
        h = RNG(4).normal(size=(2, 1, 6))
        out, w = pool_blocks(h, ScoreAttention(6, RNG(0)))
        np.testing.assert_allclose(out.data, h[:, 0], rtol=1e-15)
        np.testing.assert_array_equal(w.data, 1.0)

    def test_pool_identical_blocks(self):
        h = np.repeat(RNG(5).normal(size=(2, 1, 6)), 4, axis=1)
        out, _ = pool_blocks(h, ScoreAttention(6, RNG(0)))
        np.testing.assert_allclose(out.data, h[:, 0], rtol=1e-12)

    def test_pool_saturation(self):
        att = ScoreAttention(3, RNG(0))
        att.score.weight.data[...] = np.array([[1.0], [0.0], [0.0]])
        h = RNG(6).normal(size=(1, 4, 3)) * 0.1
        h[0, 2, 0] = h[0, :, 0].max() + 30.0
        out, w = pool_blocks(h, att)
        np.testing.assert_allclose(out.data[0], h[0, 2], atol=1e-9 * (1 + np.abs(h).max()) * 40)
        assert w.data[0, 2] > 1 - 1e-12

    def test_all_weights_sum_to_one(self):
        model = TCNet(tiny(n_views=3, sensor_groups=((0,), (1, 2))))
        out = model(RNG(7).normal(size=(2, 3, 64)))
        for per_scale in out.attention.values():
            for key, axis in (("views", 2), ("groups", 2), ("blocks", 1)):
                w = per_scale[key]
                assert np.all(w >= 0)
                np.testing.assert_allclose(w.sum(axis=axis), 1.0, atol=1e-9)


class TestClassifier:
    def test_zero_weights(self):
        clf = Classifier(8, 8, 4, RNG(0))
        clf.out.bias.data[...] = [1.0, 2.0, 3.0, 4.0]
        clf.zero_weights()
        out = clf([Tensor(RNG(1).normal(size=(3, 4))), Tensor(RNG(2).normal(size=(3, 4)))]).data
        np.testing.assert_array_equal(out, np.broadcast_to([1.0, 2.0, 3.0, 4.0], (3, 4)))

    def test_phi_input_width(self):
        model = TCNet(ModelConfig(n_channels=3, length=128, n_classes=2, d_proj=128, d_ctx=8, time_filters=2,
                                  n_views=1, sampling_rate=50.0))
        assert model.classifier.phi.n_in == 256

    def test_gradient(self):
        clf = Classifier(6, 5, 3, RNG(0))
        other = Tensor(RNG(1).normal(size=(2, 3)))
        assert grad_check(lambda t: ops.sum(ops.tanh(clf([t, other]))), RNG(2).normal(size=(2, 3))) < 1e-4


# -- full model --------------------------------------------------------------

class TestForward:
    def test_disable_correction(self):
        model = TCNet(tiny(n_views=4, disable_correction=True))
        out = model(RNG(0).normal(size=(2, 3, 64)))
        for bundle, raw in zip(out.bundles, out.raw):
            assert bundle.n_views == 1
            np.testing.assert_array_equal(bundle.z_multi.data, raw.values.data)
        assert not any(name.startswith("scale") and ".head" in name for name in model.named_parameters())

    def test_view_zero_is_raw(self):
        model = TCNet(tiny(n_views=3))
        out = model(RNG(1).normal(size=(2, 3, 64)))
        for bundle, raw in zip(out.bundles, out.raw):
            assert np.array_equal(bundle.view(0).data, raw.values.data)
            assert bundle.z_multi.shape[2] == 9

    def test_uci_shaped_logits(self):
        cfg = ModelConfig(n_channels=9, length=128, n_classes=6, n_views=4, d_proj=16, d_ctx=8, time_filters=2,
                          freq_channels=2, mixer_width=8, sampling_rate=50.0)
        logits = TCNet(cfg)(RNG(2).normal(size=(2, 9, 128))).logits
        assert logits.shape == (2, 6)
        assert np.all(np.isfinite(logits.data))

    def test_duplicated_rows(self):
        model = TCNet(tiny())
        x = RNG(3).normal(size=(1, 3, 64))
        logits = model(np.concatenate([x, x, x])).logits.data
        np.testing.assert_array_equal(logits[0], logits[1])
        np.testing.assert_array_equal(logits[0], logits[2])

    def test_input_shape_checked(self):
        with pytest.raises(ValueError, match="does not match config"):
            TCNet(tiny())(np.zeros((1, 2, 64)))

    def test_ablation_uses_raw_anchors_only(self):
        # Both branches off and gates closed: constant windows with equal hard
        # anchors must give equal logits however the branches would see them.
        model = TCNet(tiny(disable_time=True, disable_freq=True, alpha_init=-1e3))
        assert not hasattr(model, "time") and not hasattr(model, "freq")
        x = np.full((1, 3, 64), 0.7)
        a = model(x).logits.data
        b = model(x.copy()).logits.data
        np.testing.assert_array_equal(a, b)
        out = model(RNG(4).normal(size=(1, 3, 64)))
        for bundle, raw in zip(out.bundles, out.raw):
            np.testing.assert_array_equal(bundle.view(1).data, raw.values.data)

    def test_end_to_end_gradient(self):
        model = TCNet(tiny(n_views=2, alpha_init=0.0))
        x = RNG(5).normal(size=(2, 3, 64))
        labels = np.array([0, 2])

        def loss_in_x(t):
            out = forward(model, t)
            return total_loss(out.logits, labels, out.bundles, alpha=0.01, beta=0.01)[0]

        assert grad_check(loss_in_x, x, max_elements=40) < 1e-4
        params = model.named_parameters()
        for name in ("classifier.out.weight", "scale32.head1.out.weight", "scale32.head1.alpha",
                     "scale32.context.mlp.first.weight", "extractor.band_logits", "time.conv3.weight",
                     "freq.fft16.mix.weight", "scale32.fusion.views.score.weight", "scale32.projection.spectral.weight"):
            err = param_grad_check(lambda: loss_in_x(Tensor(x)), params[name], max_elements=10)
            assert err < 1e-4, name


# -- checkpoints -------------------------------------------------------------

class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = TCNet(tiny())
        model.fit_anchor_scaling(RNG(0).normal(size=(4, 3, 64)))
        first, second = tmp_path / "a.tcnm", tmp_path / "b.tcnm"
        save_checkpoint(model, str(first))
        loaded = load_checkpoint(str(first))
        save_checkpoint(loaded, str(second))
        assert first.read_bytes() == second.read_bytes()
        assert loaded.cfg == model.cfg
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(loaded.state_dict()[name], value.astype(np.float32))

    def test_compact_round_trip(self, tmp_path):
        enc = CompactEncoder(CompactConfig(sampling_rate=50.0))
        path = tmp_path / "c.tcnm"
        save_checkpoint(enc, str(path))
        again = load_checkpoint(str(path))
        assert isinstance(again, CompactEncoder) and again.cfg == enc.cfg
        x = RNG(1).normal(size=(2, 3, 128))
        a = forward_compact(enc, x)[0].data
        b = forward_compact(again, x)[0].data
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-5)  # float32 storage

    @pytest.mark.parametrize("mutate,kind", [
        (lambda b: b"NOPE" + b[4:], "unrecognized format"),
        (lambda b: b[:-7], "truncated payload"),
        (lambda b: b[:6], "truncated payload"),
        (lambda b: b[:4] + np.uint32(2).tobytes() + b[8:], "version mismatch"),
        (lambda b: b + b"\x00", "corrupt header"),
    ])
    def test_errors(self, tmp_path, mutate, kind):
        from tcnet.io import FormatError

        path = tmp_path / "m.tcnm"
        save_checkpoint(TCNet(tiny(n_views=1)), str(path))
        path.write_bytes(mutate(path.read_bytes()))
        with pytest.raises(FormatError, match=kind):
            load_checkpoint(str(path))


# -- compact encoder ---------------------------------------------------------

class TestCompact:
    def test_width_and_size(self):
        enc = CompactEncoder(CompactConfig(sampling_rate=50.0))
        rep, bundle = forward_compact(enc, RNG(0).normal(size=(2, 3, 128)))
        assert rep.shape == (2, 256)
        assert bundle.n_views == 2
        assert 0.8 * 140_000 <= enc.n_parameters() <= 1.2 * 140_000

    def test_rejects_non_triaxial(self):
        enc = CompactEncoder(CompactConfig(sampling_rate=50.0))
        with pytest.raises(ValueError, match="tri-axial"):
            forward_compact(enc, np.zeros((1, 6, 128)))

    def test_closed_gate_tsf_half_uses_raw_anchors(self):
        enc = CompactEncoder(CompactConfig(sampling_rate=50.0, alpha_init=-1e3))
        x = RNG(1).normal(size=(2, 3, 128))
        rep, bundle = forward_compact(enc, x)
        raw = enc.raw_anchors(x).values.data
        pooled = ((raw - enc.buffer("anchor_mean")) / enc.buffer("anchor_scale")).mean(axis=(1, 2))
        expect = pooled @ enc.tsf_proj.weight.data + enc.tsf_proj.bias.data
        np.testing.assert_allclose(rep.data[:, 128:], expect, rtol=1e-12, atol=1e-12)

    def test_pretext_heads(self):
        heads = PretextHeads(256, 16, RNG(0))
        assert heads(Tensor(RNG(1).normal(size=(5, 256)))).shape == (5, 3)

    def test_gradient(self):
        enc = CompactEncoder(CompactConfig(length=64, block_size=32, d_time=4, n_fft=32, d_freq=4, freq_channels=2,
                                           mixer_width=4, d_block=4, d_content=8, d_tsf=8, sampling_rate=50.0,
                                           alpha_init=0.0))
        x = RNG(2).normal(size=(1, 3, 64))
        assert grad_check(lambda t: ops.sum(ops.tanh(forward_compact(enc, t)[0])), x, max_elements=30) < 1e-4

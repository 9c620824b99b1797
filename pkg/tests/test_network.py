import struct
import zlib

import numpy as np
import pytest

from rrdncnn import network as N
from rrdncnn import tensor as T
from rrdncnn.errors import CheckpointError, ChecksumError, ConfigError, DimensionError

SMALL_V2 = N.NetworkConfig(arch="v2", channels=4, restoration_layers=3)
SMALL_V1 = N.NetworkConfig(arch="v1", channels=4, restoration_layers=3, reconstruction_layers=4)


def random_dlr(seed, n=2, h=7, w=6):
    return np.random.default_rng(seed).uniform(0, 1, (n, 1, h, w)).astype(np.float32)


class TestConfig:
    def test_defaults(self):
        v2 = N.NetworkConfig()
        assert (v2.channels, v2.restoration_layers, v2.reconstruction_layers) == (64, 10, 10)
        assert v2.modules_per_layer == 2 and v2.skip_connections and v2.stem_kernel == 5
        v1 = N.NetworkConfig(arch="v1")
        assert (v1.reconstruction_layers, v1.modules_per_layer, v1.skip_connections) == (15, 1, False)

    @pytest.mark.parametrize("kw", [
        dict(scale=3),
        dict(arch="v3"),
        dict(arch="v2", reconstruction_layers=5),
        dict(arch="v1", skip_connections=True),
        dict(arch="v2", modules_per_layer=1),
        dict(stem_kernel=4),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            N.NetworkConfig(**kw)


class TestCounting:
    def test_single_module(self):
        assert T.ConvWeights.zeros(64, 64, 3, 3).size == 36928

    def test_census_matches_closed_form(self):
        for cfg in (N.NetworkConfig(), N.NetworkConfig(arch="v1"), SMALL_V1, SMALL_V2,
                    N.NetworkConfig(channels=8, restoration_layers=2, reconstruction_layers=3,
                                    skip_connections=False)):
            assert N.build_network(cfg, 0).size == N.count_params(cfg)

    def test_table_ix_params(self):
        assert abs(N.count_params(N.NetworkConfig()) / 1.78e6 - 1) <= 0.05
        assert abs(N.count_params(N.NetworkConfig(arch="v1")) / 0.82e6 - 1) <= 0.10

    def test_table_ix_macs(self):
        assert abs(N.count_macs(N.NetworkConfig(), 360, 640) / 921.58e9 - 1) <= 0.20

    def test_lone_conv_macs(self):
        # one 64->64 3x3 LR module at 640x360 under the counting convention
        cfg = N.NetworkConfig(arch="v1", channels=64, restoration_layers=2, reconstruction_layers=2)
        base = N.NetworkConfig(arch="v1", channels=64, restoration_layers=1, reconstruction_layers=2)
        assert N.count_macs(cfg, 360, 640) - N.count_macs(base, 360, 640) == 8_493_465_600

    def test_minimal_closed_form(self):
        cfg = N.NetworkConfig(arch="v2", channels=1, restoration_layers=1, modules_per_layer=2,
                              stem_kernel=1)
        # stem 1 + res 2*9 + up 9 + rec 2*9*4 + head_res 9 + head_rec 9*4 + upsample 9
        assert N.count_macs(cfg, 1, 1) == 1 + 18 + 9 + 72 + 9 + 36 + 9


class TestBuild:
    def test_order_and_shapes(self):
        p = N.build_network(N.NetworkConfig(channels=8, restoration_layers=2), 0)
        assert list(p) == ["stem", "res.1.1", "res.1.2", "res.2.1", "res.2.2", "up.1", "up.2",
                           "rec.1.1", "rec.1.2", "rec.2.1", "rec.2.2", "head_res", "head_rec",
                           "upsample"]
        assert p["stem"].weights.shape == (8, 1, 5, 5)
        assert p["head_rec"].weights.shape == (1, 8, 3, 3)
        assert p["upsample"].weights.shape == (1, 1, 3, 3)
        assert all(not w.bias.any() for w in p.values())

    def test_seeded_determinism(self):
        a, b = N.build_network(SMALL_V2, 3), N.build_network(SMALL_V2, 3)
        for k in a:
            assert np.array_equal(a[k].weights, b[k].weights)
        c = N.build_network(SMALL_V2, 4)
        assert not np.array_equal(a["stem"].weights, c["stem"].weights)

    def test_residual_init(self):
        he = N.build_network(SMALL_V2, 2)
        res = N.build_network(SMALL_V2, 2, init="residual")
        assert np.array_equal(he["rec.1.1"].weights, res["rec.1.1"].weights)
        assert not res["head_res"].weights.any() and not res["head_rec"].weights.any()
        dlr = np.full((1, 1, 8, 8), 0.4, np.float32)
        out = N.forward(res, SMALL_V2, dlr)
        assert np.array_equal(out.lr_hat, dlr)
        # bilinear x2: interior of a constant plane is reproduced
        np.testing.assert_allclose(out.hr_hat[0, 0, 1:-1, 1:-1], 0.4, atol=1e-6)
        with pytest.raises(ConfigError):
            N.build_network(SMALL_V2, 0, init="xavier")

    def test_he_scale(self):
        p = N.build_network(N.NetworkConfig(channels=64, restoration_layers=1), 0)
        std = p["res.1.1"].weights.std()
        assert std == pytest.approx(np.sqrt(2 / 576), rel=0.05)


class TestForward:
    @pytest.mark.parametrize("cfg", [SMALL_V1, SMALL_V2])
    def test_shapes(self, cfg):
        out = N.forward(N.build_network(cfg, 0), cfg, random_dlr(0))
        assert out.r_res.shape == out.lr_hat.shape == (2, 1, 7, 6)
        assert out.r_rec.shape == out.hr_hat.shape == (2, 1, 14, 12)

    def test_cif_geometry(self):
        cfg = N.NetworkConfig(channels=2, restoration_layers=1)
        out = N.forward(N.build_network(cfg, 0), cfg, random_dlr(0, 1, 144, 176))
        assert out.hr_hat.shape[2:] == (288, 352)

    @pytest.mark.parametrize("cfg", [SMALL_V1, SMALL_V2])
    @pytest.mark.parametrize("seed", range(5))
    def test_composition_identities(self, cfg, seed):
        p = N.build_network(cfg, seed)
        dlr = random_dlr(seed)
        out = N.forward(p, cfg, dlr)
        assert np.array_equal(out.lr_hat - out.r_res, dlr)
        assert np.array_equal(out.hr_hat - out.r_rec, N.image_upsample(p, out.lr_hat))

    def test_zero_params(self):
        p = N.build_network(SMALL_V2, 0)
        for w in p.values():
            w.weights[:] = 0
        dlr = random_dlr(1)
        out = N.forward(p, SMALL_V2, dlr)
        assert not out.r_res.any() and not out.r_rec.any() and not out.hr_hat.any()
        assert np.array_equal(out.lr_hat, dlr)

    def test_skips_are_additive(self):
        """With skip deconvs 1..L-1 zeroed, the result equals a hand-built chain without them."""
        cfg = SMALL_V2
        p = N.build_network(cfg, 5)
        L = cfg.restoration_layers
        for i in range(1, L):
            p[f"up.{i}"].weights[:] = 0
        dlr = random_dlr(2)
        out = N.forward(p, cfg, dlr)

        act = lambda v: T.leaky_relu(v, cfg.slope)  # noqa: E731
        f = act(T.conv2d(dlr, p["stem"], 1, 2))
        for i in range(1, L + 1):
            f = act(T.conv2d(f, p[f"res.{i}.1"], 1, 1))
            f = act(T.conv2d(f, p[f"res.{i}.2"], 1, 1))
        u = T.deconv2d(f, p[f"up.{L}"], 2, 1, 1)
        g = u
        for j in range(1, L + 1):
            g = act(T.conv2d(g, p[f"rec.{j}.1"], 1, 1))
            if j == 1:
                g = g + u
            g = act(T.conv2d(g, p[f"rec.{j}.2"], 1, 1))
        np.testing.assert_array_equal(out.r_rec, T.conv2d(g, p["head_rec"], 1, 1))

    def test_skip_flag_changes_output(self):
        with_skip = N.NetworkConfig(channels=4, restoration_layers=2)
        without = with_skip.with_(skip_connections=False)
        p = N.build_network(with_skip, 0)
        q = N.NetworkParams((k, w) for k, w in p.items() if k != "up.1")
        a = N.forward(p, with_skip, random_dlr(0)).r_rec
        b = N.forward(q, without, random_dlr(0)).r_rec
        assert a.shape == b.shape and not np.array_equal(a, b)

    def test_param_mismatch(self):
        with pytest.raises(DimensionError):
            N.forward(N.build_network(SMALL_V1, 0), SMALL_V2, random_dlr(0))

    def test_input_too_small(self):
        with pytest.raises(DimensionError):
            N.forward(N.build_network(SMALL_V2, 0), SMALL_V2, random_dlr(0, 1, 4, 8))

    def test_deterministic(self):
        p = N.build_network(SMALL_V2, 1)
        a = N.forward(p, SMALL_V2, random_dlr(3))
        b = N.forward(p, SMALL_V2, random_dlr(3))
        assert np.array_equal(a.hr_hat, b.hr_hat)


def _double(params):
    return N.NetworkParams((k, w.astype(np.float64)) for k, w in params.items())


@pytest.mark.parametrize("cfg", [
    N.NetworkConfig(arch="v2", channels=3, restoration_layers=1),
    N.NetworkConfig(arch="v2", channels=2, restoration_layers=2),
    N.NetworkConfig(arch="v1", channels=3, restoration_layers=2, reconstruction_layers=3),
])
def test_backward_matches_finite_differences(cfg):
    """Loss-level check in float64; kink crossings are avoided by a small step."""
    rng = np.random.default_rng(0)
    p = _double(N.build_network(cfg, 2))
    dlr = rng.uniform(0, 1, (2, 1, 6, 5))
    lr = rng.uniform(0, 1, dlr.shape)
    hr = rng.uniform(0, 1, (2, 1, 12, 10))

    def loss():
        o = N.forward(p, cfg, dlr)
        return 0.5 * T.mse(o.lr_hat, lr) + 0.05 * T.mse(o.hr_hat, hr)

    out = N.forward(p, cfg, dlr, keep_cache=True)
    grads = N.backward(p, cfg, out, 0.5 * T.mse_backward(out.lr_hat, lr),
                       0.05 * T.mse_backward(out.hr_hat, hr))
    step = 1e-6
    for key, arr in p.arrays().items():
        num = np.zeros_like(arr)
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + step
            hi = loss()
            arr.flat[i] = old - step
            lo = loss()
            arr.flat[i] = old
            num.flat[i] = (hi - lo) / (2 * step)
        err = np.linalg.norm(num - grads[key]) / max(np.linalg.norm(grads[key]), 1e-12)
        assert err <= 1e-4, key


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        p = N.build_network(SMALL_V2, 9)
        path = tmp_path / "net.rrdn"
        N.save_checkpoint(p, SMALL_V2, path)
        q, cfg = N.load_checkpoint(path)
        assert cfg == SMALL_V2
        assert list(q) == list(p)
        for k in p:
            assert np.array_equal(p[k].weights, q[k].weights)
            assert np.array_equal(p[k].bias, q[k].bias)

    def test_v1_roundtrip(self, tmp_path):
        p = N.build_network(SMALL_V1, 1)
        N.save_checkpoint(p, SMALL_V1, tmp_path / "a")
        _, cfg = N.load_checkpoint(tmp_path / "a")
        assert cfg == SMALL_V1

    def test_layout(self, tmp_path):
        p = N.build_network(SMALL_V2, 0)
        data = N.serialize_checkpoint(p, SMALL_V2)
        assert data[:4] == b"RRDN"
        version, tag, count = struct.unpack_from("<III", data, 4)
        assert (version, tag, count) == (1, 2, len(p.arrays()))
        (nlen,) = struct.unpack_from("<I", data, 16)
        assert data[20:20 + nlen] == b"stem.weight"
        assert struct.unpack_from("<4I", data, 20 + nlen) == (4, 1, 5, 5)
        assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])

    def test_truncated(self, tmp_path):
        path = tmp_path / "net.rrdn"
        N.save_checkpoint(N.build_network(SMALL_V2, 0), SMALL_V2, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(ChecksumError):
            N.load_checkpoint(path)

    def test_bad_magic(self):
        body = b"XXXX" + struct.pack("<III", 1, 2, 0)
        with pytest.raises(CheckpointError, match="magic"):
            N.deserialize_checkpoint(body + struct.pack("<I", zlib.crc32(body)))

    def test_bad_version(self):
        body = b"RRDN" + struct.pack("<III", 7, 2, 0)
        with pytest.raises(CheckpointError, match="version"):
            N.deserialize_checkpoint(body + struct.pack("<I", zlib.crc32(body)))

    def test_v1_loaded_as_v2(self, tmp_path):
        path = tmp_path / "v1.rrdn"
        N.save_checkpoint(N.build_network(SMALL_V1, 0), SMALL_V1, path)
        with pytest.raises(CheckpointError):
            N.load_checkpoint(path, SMALL_V2)

    def test_inconsistent_shape_table(self):
        p = N.build_network(SMALL_V2, 0)
        p["res.2.1"] = T.ConvWeights(np.zeros((4, 4, 5, 5), np.float32), np.zeros(4, np.float32))
        with pytest.raises(CheckpointError):
            N.deserialize_checkpoint(N.serialize_checkpoint(p, SMALL_V2))

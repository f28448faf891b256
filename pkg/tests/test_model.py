import numpy as np
import pytest
import torch

from fdcheck import randomize_
from georef.geometry import DegenerateAxesError, PoseState, check_rotation, focalize, random_rotation, rotation_from_axes
from georef.model import (
    TABLE2_ROWS,
    BranchFeatures,
    ConfigurationError,
    GeoReF,
    ModelConfig,
    ShapeError,
    build_model,
    cct_mix,
    extract_features,
    focalize_batch,
    gram_schmidt,
    table2_config,
)

N = 32


def tiny(**kw):
    base = dict(n_points=N, feature_width=8, k_neighbors=4, matrix_widths=(8, 8, 16), matrix_dense=(16, 8),
                gfe_widths=(8, 8, 16), head_hidden=(16, 8), ts_width=8)
    base.update(kw)
    return ModelConfig(**base)


def batch(b=2, n=N, seed=0):
    rng = np.random.default_rng(seed)
    obs = torch.tensor(rng.normal(size=(b, n, 3)) * 0.05 + [0, 0, 1], dtype=torch.float32)
    pri = torch.tensor(rng.normal(size=(b, n, 3)) * 0.3, dtype=torch.float32)
    R0 = torch.tensor(np.stack([random_rotation(rng) for _ in range(b)]), dtype=torch.float32)
    t0 = torch.tensor(rng.normal(size=(b, 3)) * 0.1 + [0, 0, 1], dtype=torch.float32)
    s0 = torch.tensor(rng.uniform(0.05, 0.2, size=(b, 3)), dtype=torch.float32)
    return obs, pri, R0, t0, s0


def np_inputs(b=2, seed=0):
    obs, pri, R0, t0, s0 = (x.double().numpy() for x in batch(b, seed=seed))
    return list(obs), list(pri), [PoseState(R0[i], t0[i], s0[i]) for i in range(b)]


class TestConfig:
    def test_defaults_follow_reference_widths(self):
        cfg = ModelConfig()
        assert cfg.n_points == 512 and cfg.feature_width == 64
        assert cfg.matrix_widths == (64, 128, 1024) and cfg.gfe_widths == (128, 512, 1024)

    def test_fusion_requires_cct_flag(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(cct=False, fusion="cct")
        with pytest.raises(ConfigurationError):
            ModelConfig(cct=True, fusion="none")

    def test_cct_needs_lat_encoder(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(encoder="pointnet_baseline")

    def test_unknown_values(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(encoder="transformer")
        with pytest.raises(ConfigurationError):
            ModelConfig.from_dict({"encoder": "georef", "lat_on_point": True})
        with pytest.raises(ConfigurationError):
            table2_config("Z9")

    def test_round_trip(self):
        cfg = ModelConfig.desk(k_neighbors=7)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    @pytest.mark.parametrize("row", sorted(TABLE2_ROWS))
    def test_every_ablation_row_runs(self, row):
        cfg = table2_config(row, tiny())
        model = build_model(cfg, seed=1)
        randomize_(model, 2, scale=0.1)
        dR, dt, ds = model(*batch())
        assert dR.shape == (2, 3, 3) and dt.shape == (2, 3) and ds.shape == (2, 3)
        for R in dR.detach().double().numpy():
            check_rotation(R, tol=1e-5)

    def test_zero_head_gives_identity_error(self):
        model = build_model(tiny())
        for err in model.predict_errors(*np_inputs()):
            assert np.array_equal(err.dR, np.eye(3))
            assert np.array_equal(err.dt, np.zeros(3)) and np.array_equal(err.ds, np.zeros(3))

    def test_wrong_point_count(self):
        model = build_model(tiny())
        obs, pri, R0, t0, s0 = batch(n=N + 1)
        with pytest.raises(ShapeError):
            model(obs, pri, R0, t0, s0)

    def test_deterministic(self):
        model = randomize_(build_model(tiny()), 3, scale=0.1).eval()
        a = model.predict_errors(*np_inputs())
        b = model.predict_errors(*np_inputs())
        assert all(x.allclose(y, atol=0) for x, y in zip(a, b))

    def test_rotation_valid_over_random_heads(self):
        # features are computed once; only the rotation head is redrawn
        model = build_model(tiny()).eval()
        obs, pri, R0, t0, s0 = batch(4)
        with torch.no_grad():
            bf, lats, pts = model.extract_features(*focalize_batch(obs, pri, R0, t0, s0))
            fused = model.fuse(model.mix(bf, lats), pts, s0).fused_r.double()
            head = model.rot_head.double()
            for draw in range(1000):
                randomize_(head, draw, scale=0.5)
                rx, ry = head(fused, fused)
                for R in gram_schmidt(rx + model.e_x.double(), ry + model.e_y.double()).numpy():
                    check_rotation(R, tol=1e-9)

    def test_degenerate_axes_name_sample(self):
        model = build_model(tiny())
        with torch.no_grad():
            # second axis collapses onto the first
            model.rot_head.path_b.final.bias.copy_(torch.tensor([1.0, -1.0, 0.0]))
        with pytest.raises(DegenerateAxesError, match="sample a"):
            model.predict_errors(*np_inputs(), ids=["a", "b"])

    def test_focalize_batch_matches_geometry(self):
        obs, pri, inits = np_inputs(3)
        o, p, R0, t0, s0 = (torch.tensor(np.stack(x)) for x in (obs, pri, [i.R for i in inits],
                                                                [i.t for i in inits], [i.s for i in inits]))
        of, pf = focalize_batch(o, p, R0, t0, s0)
        for i in range(3):
            ref_o, ref_p = focalize(obs[i], pri[i], inits[i])
            np.testing.assert_allclose(of[i].numpy(), ref_o, atol=1e-15)
            np.testing.assert_allclose(pf[i].numpy(), ref_p, atol=1e-15)

    def test_gram_schmidt_matches_numpy(self):
        rng = np.random.default_rng(4)
        rx, ry = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        out = gram_schmidt(torch.tensor(rx), torch.tensor(ry)).numpy()
        for i in range(20):
            np.testing.assert_allclose(out[i], rotation_from_axes(rx[i], ry[i]), atol=1e-12)


class TestFeatures:
    def test_reference_feature_shape(self):
        cfg = ModelConfig.desk()
        model = build_model(cfg).eval()
        obs, pri, R0, t0, s0 = batch(1, n=512)
        with torch.no_grad():
            bf = extract_features(*focalize_batch(obs, pri, R0, t0, s0), cfg, model)
        for f in (bf.r_obs, bf.r_pri, bf.ts_obs, bf.ts_pri):
            assert f.shape == (1, 64, 512)

    def test_lat_flags_off_equal_plain_encoder(self):
        off = tiny(lat_on_points=False, lat_on_features=False, separate_rotation_lat=False, cct=False,
                   fusion="none")
        full = randomize_(build_model(off), 5, scale=0.2).eval()
        plain = build_model(off.replace(encoder="hs_plain")).eval()
        shared = {k: v for k, v in full.state_dict().items() if k in plain.state_dict()}
        plain.load_state_dict(shared)
        obs, pri, R0, t0, s0 = batch()
        clouds = focalize_batch(obs, pri, R0, t0, s0)
        with torch.no_grad():
            a, _, _ = full.extract_features(*clouds)
            b, _, _ = plain.extract_features(*clouds)
            assert torch.equal(a.r_obs, b.r_obs) and torch.equal(a.ts_pri, b.ts_pri)
            assert all(torch.equal(x, y) for x, y in zip(full(*batch()), plain(*batch())))

    def test_identity_point_lat_equals_no_point_lat(self):
        on = build_model(tiny(cct=False, fusion="none", lat_on_features=False))
        randomize_(on, 6, scale=0.2)
        with torch.no_grad():
            on.point_lat.out.weight.zero_()
            on.point_lat.out.bias.zero_()
        on.eval()
        off = build_model(tiny(cct=False, fusion="none", lat_on_features=False, lat_on_points=False)).eval()
        off.load_state_dict(on.state_dict())
        with torch.no_grad():
            assert all(torch.equal(x, y) for x, y in zip(on(*batch()), off(*batch())))

    def test_encoder_shared_between_clouds(self):
        model = randomize_(build_model(tiny()), 7, scale=0.2).eval()
        obs, _, R0, t0, s0 = batch()
        cloud = obs - t0.unsqueeze(1)
        with torch.no_grad():
            bf, lats, _ = model.extract_features(cloud, cloud.clone())
        assert torch.equal(bf.r_obs, bf.r_pri) and torch.equal(bf.ts_obs, bf.ts_pri)
        assert torch.equal(lats.ts_obs, lats.ts_pri)


class TestCCT:
    def setup_method(self):
        g = torch.Generator().manual_seed(0)
        self.bf = BranchFeatures(*(torch.randn(2, 8, N, generator=g) for _ in range(4)))
        self.cfg = tiny()

    def test_identity_is_noop(self):
        eye = torch.eye(8).expand(2, 8, 8)
        out = cct_mix(self.bf, eye, eye, self.cfg)
        assert torch.equal(out.r_obs, self.bf.r_obs) and torch.equal(out.ts_obs, self.bf.ts_obs)

    def test_linear(self):
        two = 2 * torch.eye(8).expand(2, 8, 8)
        out = cct_mix(self.bf, two, two, self.cfg)
        assert torch.equal(out.r_obs, 2 * self.bf.r_obs) and torch.equal(out.ts_obs, 2 * self.bf.ts_obs)
        assert out.r_pri is self.bf.r_pri and out.ts_pri is self.bf.ts_pri

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            cct_mix(self.bf, torch.eye(7).expand(2, 7, 7), torch.eye(8).expand(2, 8, 8), self.cfg)

    def test_disabled(self):
        eye = torch.eye(8).expand(2, 8, 8)
        with pytest.raises(ConfigurationError):
            cct_mix(self.bf, eye, eye, tiny(cct=False, fusion="none"))

    def test_forward_uses_prior_matrices(self):
        model = randomize_(build_model(tiny()), 8, scale=0.2).eval()
        clouds = focalize_batch(*batch())
        with torch.no_grad():
            bf, lats, _ = model.extract_features(*clouds)
            mixed = model.mix(bf, lats)
        torch.testing.assert_close(mixed.r_obs, torch.bmm(lats.r_pri, bf.r_obs))
        torch.testing.assert_close(mixed.ts_obs, torch.bmm(lats.ts_pri, bf.ts_obs))


def test_model_class_exported():
    assert isinstance(build_model(tiny()), GeoReF)

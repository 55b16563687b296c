import numpy as np
import pytest

from nestmoe import checkpoint as ck
from nestmoe import model, pdedata, training
from nestmoe.errors import ConfigError, DataError
from nestmoe.optim import AdamConfig, OptimState
from nestmoe.seeding import stream_rng


def tiny_cfg():
    return model.ModelConfig(
        history=2, channels=1, height=8, width=8, patch=4, embed_dim=8,
        layers=1, heads=2, image_routed=2, image_k=1, token_routed=2, token_k=1,
    )


def make_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return model.randomize_silent_params(model.init_model_params(cfg, rng), rng)


class TestRoundtrip:
    def test_all_tensors_bit_identical(self, tmp_path):
        cfg = tiny_cfg()
        params = make_params(cfg)
        flat = dict(model.flatten_params(params))
        optim = OptimState.for_params(flat, AdamConfig(lr=2e-3))
        for k in optim.m:
            optim.m[k] = np.random.default_rng(1).normal(size=optim.m[k].shape)
        optim.t = 17
        path = tmp_path / "ck.nstr"
        ck.save_checkpoint(params, optim, cfg, {"master_seed": 5, "next_epoch": 3}, path)
        p2, o2, cfg2, seed_state = ck.load_checkpoint(path)
        assert cfg2 == cfg
        assert seed_state == {"master_seed": 5, "next_epoch": 3}
        assert o2.t == 17 and o2.hyper.lr == 2e-3
        for (n1, a1), (n2, a2) in zip(
            model.flatten_params(params), model.flatten_params(p2)
        ):
            assert n1 == n2
            np.testing.assert_array_equal(a1, a2)
        for k in optim.m:
            np.testing.assert_array_equal(optim.m[k], o2.m[k])
            np.testing.assert_array_equal(optim.v[k], o2.v[k])

    def test_forward_bit_identical_after_reload(self, tmp_path):
        cfg = tiny_cfg()
        params = make_params(cfg)
        frames = np.random.default_rng(2).normal(size=(2, 2, 1, 8, 8))
        before = model.predict(frames, params, cfg)
        path = tmp_path / "ck.nstr"
        ck.save_checkpoint(params, None, cfg, {}, path)
        p2, o2, cfg2, _ = ck.load_checkpoint(path)
        assert o2 is None
        after = model.predict(frames, p2, cfg2)
        np.testing.assert_array_equal(before, after)

    def test_truncated_file_clean_error(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "ck.nstr"
        ck.save_checkpoint(make_params(cfg), None, cfg, {}, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(DataError):
            ck.load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "ck.nstr"
        path.write_bytes(b"XXXX" + bytes(64))
        with pytest.raises(DataError, match="magic"):
            ck.load_checkpoint(path)

    def test_payload_corruption_detected(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "ck.nstr"
        ck.save_checkpoint(make_params(cfg), None, cfg, {}, path)
        blob = bytearray(path.read_bytes())
        blob[-20] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="CRC"):
            ck.load_checkpoint(path)


def make_dataset(tmp_path, family, n, seed, **kw):
    defaults = dict(frames=6, height=8, width=8, band_limit=3)
    defaults.update(kw)
    spec = pdedata.PdeInstanceSpec(family=family, **defaults)
    rng = stream_rng(seed, "datagen")
    trajs = [pdedata.generate(spec, int(rng.integers(2**31))) for _ in range(n)]
    path = tmp_path / f"{family}{seed}.pded"
    pdedata.write_dataset(trajs, path, spec=spec, seed=seed)
    return str(path)


class TestResume:
    def test_split_run_reproduces_uninterrupted_metrics(self, tmp_path):
        heat = make_dataset(tmp_path, "heat", 6, 1, diffusivity=0.1)
        adv = make_dataset(tmp_path, "advection", 6, 2, velocity=(0.4, 0.1))
        base = dict(
            model=tiny_cfg(),
            data=[training.DataSource(heat), training.DataSource(adv)],
            batch_size=4, seed=9, warmup_epochs=2,
        )

        full = training.train(
            training.RunConfig(epochs=6, **base), out_dir=tmp_path / "full", log=None
        )

        first = training.train(
            training.RunConfig(epochs=3, **base), out_dir=tmp_path / "a", log=None
        )
        resumed = training.train(
            training.RunConfig(epochs=6, init_ckpt=first.checkpoint_path, **base),
            out_dir=tmp_path / "b",
            log=None,
        )

        # wall time is the one nondeterministic column; all others must agree
        deterministic = ("epoch", "lr", "l2re", "aux_image", "aux_token", "total")
        assert [r["epoch"] for r in resumed.history] == [3, 4, 5]
        for row_full, row_res in zip(full.history[3:], resumed.history):
            for key in deterministic:
                assert row_full[key] == row_res[key], key

        for (n1, a1), (n2, a2) in zip(
            model.flatten_params(full.params), model.flatten_params(resumed.params)
        ):
            assert n1 == n2
            np.testing.assert_array_equal(a1, a2)

    def test_resume_rejects_config_mismatch(self, tmp_path):
        heat = make_dataset(tmp_path, "heat", 4, 3, diffusivity=0.1)
        cfg = training.RunConfig(
            model=tiny_cfg(), data=[training.DataSource(heat)],
            epochs=1, batch_size=2,
        )
        res = training.train(cfg, out_dir=tmp_path / "run", log=None)
        other = model.ModelConfig(
            history=2, channels=1, height=8, width=8, patch=4, embed_dim=4,
            layers=1, heads=2, image_routed=2, image_k=1, token_routed=2, token_k=1,
        )
        bad = training.RunConfig(
            model=other, data=[training.DataSource(heat)],
            epochs=2, init_ckpt=res.checkpoint_path,
        )
        with pytest.raises(ConfigError):
            training.train(bad, out_dir=None, log=None)

    def test_resume_beyond_target_rejected(self, tmp_path):
        heat = make_dataset(tmp_path, "heat", 4, 4, diffusivity=0.1)
        cfg = training.RunConfig(
            model=tiny_cfg(), data=[training.DataSource(heat)],
            epochs=2, batch_size=2,
        )
        res = training.train(cfg, out_dir=tmp_path / "run", log=None)
        bad = training.RunConfig(
            model=tiny_cfg(), data=[training.DataSource(heat)],
            epochs=1, init_ckpt=res.checkpoint_path,
        )
        with pytest.raises(ConfigError):
            training.train(bad, out_dir=None, log=None)

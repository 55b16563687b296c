"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. The training-based
criteria (6 and 7) dominate the runtime; everything is seeded and
deterministic.
"""

import time
import warnings

import numpy as np
import pytest

from nestmoe import autodiff as ad
from nestmoe import checkpoint as ck
from nestmoe import experts, kernels, losses, model, pdedata, routing, training
from nestmoe.losses import LossConfig
from nestmoe.model import ModelConfig
from nestmoe.seeding import stream_rng


def report(name: str, passed: bool, detail: str = ""):
    print(f"\n[{'PASS' if passed else 'FAIL'}] {name}: {detail}")


# ---------------------------------------------------------------------------
# criterion 1: gradient suite
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_suite():
    t0 = time.time()
    failures = []
    worst = {}
    for name in sorted(ad.GRAD_CASES):
        tol = 1e-4 if name == "forward_total_loss" else 1e-5
        rep = ad.grad_check(name, tol=tol, h=1e-5, seeds=(0, 1, 2))
        worst[name] = rep.max_rel_err
        if not rep.passed:
            failures.append((name, rep.max_rel_err, rep.detail))
    elapsed = time.time() - t0
    detail = (
        f"{len(worst)} ops, worst rel err {max(worst.values()):.2e}, {elapsed:.0f}s"
    )
    report("criterion 1 gradient suite", not failures and elapsed < 120, detail)
    assert not failures, failures
    assert elapsed < 120, f"gradient suite took {elapsed:.0f}s (budget 120s)"


# ---------------------------------------------------------------------------
# criterion 2: tiled attention equivalence
# ---------------------------------------------------------------------------


def test_criterion_02_attention_equivalence():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        b = int(rng.integers(1, 3))
        heads = int(rng.choice([1, 2, 4]))
        gh, gw = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        c = heads * int(rng.choice([2, 4]))
        n = gh * gw
        tile = int(rng.integers(1, n + 3))
        p = experts.init_attention(rng, c, heads, 1, routed=2, shared=1, k=1)
        p.w_o = rng.normal(size=(c, c))
        for m in p.sub_moe.routed + p.sub_moe.shared:
            m.w2 = rng.normal(size=m.w2.shape)
            m.b2 = rng.normal(size=m.b2.shape)
        x = rng.normal(size=(b, gh, gw, c))
        naive = experts.attention_expert_np(x, p)
        tiled = experts.attention_expert_tiled_np(x, p, tile)
        worst = max(worst, float(np.abs(naive - tiled).max()))
    report("criterion 2 attention equivalence", worst < 1e-10, f"worst |delta| {worst:.2e}")
    assert worst < 1e-10


# ---------------------------------------------------------------------------
# criterion 3: routing laws
# ---------------------------------------------------------------------------


def test_criterion_03_routing_laws():
    rng = np.random.default_rng(303)
    checked = 0
    batch_probs = []
    for _ in range(1000):
        e = int(rng.integers(2, 10))
        k = int(rng.integers(1, e + 1))
        scores = rng.normal(size=e) * 3
        probs = kernels.softmax(scores)
        d = routing.decide(probs, k)

        assert len(set(d.selected)) == k
        assert abs(float(np.sum(d.weights)) - 1.0) < 1e-12
        for i_pos, i in enumerate(d.selected):
            for j_pos, j in enumerate(d.selected):
                assert d.weights[i_pos] / d.weights[j_pos] == pytest.approx(
                    probs[i] / probs[j], rel=1e-9
                )
        shifted = routing.decide(kernels.softmax(scores + 57.0), k)
        assert shifted.selected == d.selected
        np.testing.assert_allclose(shifted.weights, d.weights, atol=1e-12)
        if e == 5:
            batch_probs.append((probs, k))
        checked += 1

    # stats recount oracle over a shared-width subset
    ds = [routing.decide(p, 2) for p, _ in batch_probs]
    if ds:
        stats = routing.accumulate_stats(ds)
        counts = np.zeros(5)
        prob_sum = np.zeros(5)
        for d in ds:
            prob_sum += d.full_probs
            for i in d.selected:
                counts[i] += 1
        np.testing.assert_array_equal(stats.counts, counts)
        np.testing.assert_allclose(stats.mean_probs, prob_sum / len(ds), atol=1e-12)
    report("criterion 3 routing laws", True, f"{checked} randomized gates")


# ---------------------------------------------------------------------------
# criterion 4: load-balance closed forms
# ---------------------------------------------------------------------------


def test_criterion_04_load_balance_anchors():
    for e in range(2, 17):
        uniform = routing.LoadBalanceStats(
            mean_probs=np.full(e, 1 / e), assign_frac=np.full(e, 1 / e),
            counts=np.full(e, 10, dtype=np.int64), total=10 * e,
        )
        assert abs(losses.load_balance_loss(uniform) - 1.0) < 1e-12
        one_hot = np.zeros(e)
        one_hot[0] = 1.0
        collapse = routing.LoadBalanceStats(
            mean_probs=one_hot, assign_frac=one_hot.copy(),
            counts=(one_hot * 10).astype(np.int64), total=10,
        )
        assert losses.load_balance_loss(collapse) == float(e)
    report("criterion 4 load-balance anchors", True, "E in 2..16 uniform and collapse")


# ---------------------------------------------------------------------------
# criterion 5: spectral anchors
# ---------------------------------------------------------------------------


def dft2_direct(x):
    h, w = x.shape[-2:]
    fy = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fx = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return np.einsum("uj,...jk,kv->...uv", fy, x.astype(complex), fx)


def test_criterion_05_spectral_anchors():
    rng = np.random.default_rng(505)
    worst_dft = 0.0
    for h in (1, 2, 4, 8, 16):
        for w in (1, 2, 4, 8, 16):
            x = rng.normal(size=(h, w))
            err = np.abs(kernels.fft2(x) - dft2_direct(x)).max()
            worst_dft = max(worst_dft, float(err))
    assert worst_dft < 1e-9

    worst_parseval = 0.0
    for _ in range(10):
        x = rng.normal(size=(16, 16))
        spec = kernels.fft2(x)
        worst_parseval = max(
            worst_parseval,
            abs(float(np.sum(x**2) - np.sum(np.abs(spec) ** 2) / 256)),
        )
    assert worst_parseval < 1e-8

    w = 16
    d, dt = 0.1, 1.0
    u0 = np.broadcast_to(np.cos(2 * np.pi * np.arange(w) / w), (w, w)).copy()
    factor = 1.0 - 4.0 * d * dt * np.sin(np.pi / w) ** 2
    u = u0.copy()
    worst_decay = 0.0
    for n in range(1, 51):
        u = pdedata.step_heat(u, d, dt)
        worst_decay = max(worst_decay, float(np.abs(u - u0 * factor**n).max()))
    assert worst_decay < 1e-10
    report(
        "criterion 5 spectral anchors", True,
        f"dft {worst_dft:.1e}, parseval {worst_parseval:.1e}, decay {worst_decay:.1e}",
    )


# ---------------------------------------------------------------------------
# criteria 6 and 7: the desk training run and expert specialization
# ---------------------------------------------------------------------------

DESK_MODEL = ModelConfig(loss=LossConfig(alpha=0.001, beta=0.001))
N_TRAIN = 400
EPOCHS = 200


def _gen_family(tmp, family, n, seed, **kw):
    spec = pdedata.PdeInstanceSpec(family=family, frames=8, band_limit=5, **kw)
    rng = stream_rng(seed, "datagen")
    trajs = [pdedata.generate(spec, int(rng.integers(2**31))) for _ in range(n)]
    path = tmp / f"{family}_{seed}.pded"
    pdedata.write_dataset(trajs, path, spec=spec, seed=seed)
    return str(path)


def _desk_run(tmp, seed):
    """The criterion-6 recipe: 400 mixed heat+advection trajectories,
    200 epochs, desk model."""
    heat_tr = _gen_family(tmp, "heat", N_TRAIN // 2, seed * 100 + 1, diffusivity=0.12)
    adv_tr = _gen_family(tmp, "advection", N_TRAIN // 2, seed * 100 + 2, velocity=(0.45, 0.0))
    heat_te = _gen_family(tmp, "heat", 30, seed * 100 + 3, diffusivity=0.12)
    adv_te = _gen_family(tmp, "advection", 30, seed * 100 + 4, velocity=(0.45, 0.0))
    cfg = training.RunConfig(
        model=DESK_MODEL,
        data=[training.DataSource(heat_tr), training.DataSource(adv_tr)],
        epochs=EPOCHS, batch_size=32, seed=seed, warmup_epochs=20,
        optimizer=training.AdamConfig(lr=3e-3),
    )
    t0 = time.time()
    res = training.train(cfg, out_dir=None, log=None)
    train_minutes = (time.time() - t0) / 60
    test_ds = training.load_datasets(
        [training.DataSource(heat_te), training.DataSource(adv_te)], DESK_MODEL
    )
    ev = training.evaluate(res.params, DESK_MODEL, test_ds, rollout_steps=0)
    tv = training.total_variation(
        ev.family_fractions["heat"], ev.family_fractions["advection"]
    )
    return {"eval": ev, "tv": tv, "minutes": train_minutes,
            "fractions": ev.family_fractions}


@pytest.fixture(scope="module")
def desk_run_seed0(tmp_path_factory):
    return _desk_run(tmp_path_factory.mktemp("desk0"), seed=0)


def test_criterion_06_training_smoke(desk_run_seed0):
    ev = desk_run_seed0["eval"]
    minutes = desk_run_seed0["minutes"]
    ok = (
        ev.one_step < 0.10
        and ev.one_step <= 0.7 * ev.persistence
        and minutes < 10.0
    )
    report(
        "criterion 6 training smoke", ok,
        f"one-step {ev.one_step:.4f} vs persistence {ev.persistence:.4f} "
        f"({100 * (1 - ev.one_step / ev.persistence):.0f}% below), {minutes:.1f} min",
    )
    assert ev.one_step < 0.10
    assert ev.one_step <= 0.7 * ev.persistence, "not 30% below persistence"
    assert minutes < 10.0


def test_criterion_07_expert_specialization(desk_run_seed0, tmp_path_factory):
    tvs = {0: desk_run_seed0["tv"]}
    fracs = {0: desk_run_seed0["fractions"]}
    for seed in (1, 2, 3, 4):
        out = _desk_run(tmp_path_factory.mktemp(f"desk{seed}"), seed=seed)
        tvs[seed] = out["tv"]
        fracs[seed] = out["fractions"]
    hits = sum(1 for tv in tvs.values() if tv >= 0.2)
    detail = ", ".join(f"seed {s}: TV {tv:.3f}" for s, tv in sorted(tvs.items()))
    passed = hits >= 3
    report("criterion 7 expert specialization (soft)", passed, f"{hits}/5 over 0.2 ({detail})")
    for s in sorted(fracs):
        print(f"  seed {s} heat      {np.round(fracs[s]['heat'], 3)}")
        print(f"  seed {s} advection {np.round(fracs[s]['advection'], 3)}")
    if not passed:
        # soft criterion: log the distributions rather than fail the suite
        warnings.warn(
            f"specialization below threshold in {5 - hits} of 5 seeds: {detail}"
        )


# ---------------------------------------------------------------------------
# criterion 8: sampler fidelity
# ---------------------------------------------------------------------------


def test_criterion_08_sampler_fidelity():
    cfg = pdedata.SamplerConfig(weights=(1.0, 1.0, 1.0), sizes=(10, 100, 1000))
    p = pdedata.sampler_probs(cfg)
    rng = stream_rng(808, "sampler")
    draws = pdedata.draw_samples(cfg, 100_000, rng)
    rel_errs = []
    for k in range(3):
        want = p[k] * cfg.sizes[k]
        got = float(np.mean(draws[:, 0] == k))
        rel_errs.append(abs(got - want) / want)
    worst = max(rel_errs)
    report("criterion 8 sampler fidelity", worst < 0.02, f"worst rel err {worst:.4f}")
    assert worst < 0.02


# ---------------------------------------------------------------------------
# criterion 9: persistence round-trips
# ---------------------------------------------------------------------------


def test_criterion_09_persistence_roundtrips(tmp_path):
    # dataset file roundtrips: f32 storage is idempotent after the first
    # quantization; f64 storage is bit-exact immediately
    spec = pdedata.PdeInstanceSpec(family="heat", diffusivity=0.1, frames=6, height=8, width=8)
    trajs = [pdedata.generate(spec, s) for s in range(3)]
    p1, p2 = tmp_path / "a.pded", tmp_path / "b.pded"
    pdedata.write_dataset(trajs, p1, spec=spec, seed=0)
    r1 = pdedata.read_dataset(p1)
    for a, b in zip(trajs, r1):
        np.testing.assert_array_equal(
            b.frames, a.frames.astype(np.float32).astype(np.float64)
        )
    pdedata.write_dataset(r1, p2, spec=spec, seed=0)
    r2 = pdedata.read_dataset(p2)
    for a, b in zip(r1, r2):
        np.testing.assert_array_equal(a.frames, b.frames)
    p3 = tmp_path / "c.pded"
    pdedata.write_dataset(trajs, p3, dtype_tag=1)
    for a, b in zip(trajs, pdedata.read_dataset(p3)):
        np.testing.assert_array_equal(a.frames, b.frames)

    # checkpoint roundtrip: bit-identical forward
    cfg = ModelConfig(
        history=2, channels=1, height=8, width=8, patch=4, embed_dim=8,
        layers=1, heads=2, image_routed=2, image_k=1, token_routed=2, token_k=1,
    )
    rng = np.random.default_rng(9)
    params = model.randomize_silent_params(model.init_model_params(cfg, rng), rng)
    frames = rng.normal(size=(2, 2, 1, 8, 8))
    before = model.predict(frames, params, cfg)
    ck_path = tmp_path / "m.nstr"
    ck.save_checkpoint(params, None, cfg, {"master_seed": 1, "next_epoch": 0}, ck_path)
    p_loaded, _, cfg_loaded, _ = ck.load_checkpoint(ck_path)
    np.testing.assert_array_equal(before, model.predict(frames, p_loaded, cfg_loaded))

    # split-run training resume: deterministic metrics columns reproduce
    # exactly (wall-clock seconds is inherently nondeterministic)
    heat = tmp_path / "h.pded"
    pdedata.write_dataset(
        [pdedata.generate(spec, 100 + s) for s in range(6)], heat, spec=spec, seed=1
    )
    base = dict(
        model=cfg, data=[training.DataSource(str(heat))], batch_size=4,
        seed=3, warmup_epochs=2,
    )
    full = training.train(training.RunConfig(epochs=6, **base), tmp_path / "full", log=None)
    half = training.train(training.RunConfig(epochs=3, **base), tmp_path / "half", log=None)
    resumed = training.train(
        training.RunConfig(epochs=6, init_ckpt=half.checkpoint_path, **base),
        tmp_path / "res", log=None,
    )
    for row_full, row_res in zip(full.history[3:], resumed.history):
        for key in ("epoch", "lr", "l2re", "aux_image", "aux_token", "total"):
            assert row_full[key] == row_res[key], key
    for (n1, a1), (n2, a2) in zip(
        model.flatten_params(full.params), model.flatten_params(resumed.params)
    ):
        np.testing.assert_array_equal(a1, a2, err_msg=n1)
    report("criterion 9 persistence round-trips", True,
           "dataset, checkpoint, and split-run resume all bit-exact")


# ---------------------------------------------------------------------------
# criterion 10: parameter accounting
# ---------------------------------------------------------------------------


def _enumeration_oracle(cfg: ModelConfig) -> dict:
    params = model.init_model_params(cfg, np.random.default_rng(0))
    total = activated = 0
    for name, arr in model.flatten_params(params):
        total += arr.size
        parts = name.split(".")
        active = True
        if parts[0] == "layers" and parts[2] == "routed":
            active = int(parts[3]) < cfg.image_k
            if active and len(parts) > 6 and parts[4] == "sub_moe" and parts[5] == "routed":
                active = int(parts[6]) < cfg.token_k
        if active:
            activated += arr.size
    return {"total": total, "activated": activated}


def test_criterion_10_parameter_accounting():
    rng = np.random.default_rng(1010)
    for _ in range(10):
        routed_i = int(rng.integers(1, 6))
        routed_t = int(rng.integers(1, 6))
        cfg = ModelConfig(
            history=int(rng.integers(1, 5)),
            channels=int(rng.integers(1, 3)),
            height=16, width=16, patch=int(rng.choice([4, 8])),
            embed_dim=int(rng.choice([8, 16])),
            layers=int(rng.integers(1, 4)),
            heads=int(rng.choice([1, 2])),
            mlp_ratio=int(rng.integers(1, 3)),
            image_routed=routed_i, image_k=int(rng.integers(1, routed_i + 1)),
            image_shared=int(rng.integers(1, 3)),
            token_routed=routed_t, token_k=int(rng.integers(1, routed_t + 1)),
            token_shared=int(rng.integers(1, 3)),
        )
        counts = model.param_counts(cfg)
        want = _enumeration_oracle(cfg)
        assert counts["total"] == want["total"]
        assert counts["activated"] == want["activated"]
        assert counts["ratio"] == pytest.approx(want["activated"] / want["total"])

    ratios = []
    for routed in (2, 3, 4, 6, 8, 12):
        cfg = ModelConfig(image_routed=routed, token_routed=routed)
        ratios.append(model.param_counts(cfg)["ratio"])
    monotone = all(b < a for a, b in zip(ratios, ratios[1:]))
    report(
        "criterion 10 parameter accounting", monotone,
        f"10 configs vs enumeration oracle; ratios {[round(r, 3) for r in ratios]}",
    )
    assert monotone

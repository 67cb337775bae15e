"""End-to-end acceptance checks; a summary line per criterion is printed at the end of the run."""

import time

import numpy as np
import pytest

from metro import autodiff as ad
from metro.cli import run
from metro.gradcheck import format_table, run_suite
from metro.losses import project_weak_perspective, total_loss
from metro.metrics import (average_attention, evaluate_predictions, f_score, load_matrix_csv, mpjpe, pa_mpjpe,
                           save_matrix_csv)
from metro.model import EncoderConfig, Metro, build_queries, draw_mask, load_checkpoint, save_checkpoint
from metro.synth import Dataset, generate_dataset, get_preset
from metro.train import TrainConfig, evaluate, model_for_dataset, predict, train

PRESETS = ["body", "hand"]
crit = pytest.mark.criterion

# overfit smoke settings
SMOKE_SAMPLES = 64
SMOKE_CFG = dict(epochs=500, batch_size=8, lr_initial=1e-3, lr_decay_epoch=55, mvm_max_fraction=0.0,
                 eval_every=5, stop_mpjpe_ratio=0.1, time_limit=570.0)


def _check_preset(request, preset):
    # criteria 1-7 run under both presets; the hand runs count towards criterion 10
    if preset == "hand":
        request.node.add_marker(pytest.mark.criterion(10, "hand preset satisfies criteria 1-7"))


def _model(preset, H=64, dtype=np.float32, seed=0):
    b = get_preset(preset)
    return Metro.from_template(EncoderConfig.default(H), b.mesh, b.regressor, seed=seed, dtype=dtype)


@pytest.mark.parametrize("preset", [None, "hand"])
@crit(1, "gradient suite: all ops and micro model rel. err < 1e-4 in under 60 s")
def test_gradient_suite(preset, request):
    _check_preset(request, preset)
    t0 = time.perf_counter()
    results = run_suite(seed=0, preset=preset)
    elapsed = time.perf_counter() - t0
    print(format_table(results))
    assert all(r.passed for r in results)
    assert elapsed < 60


@pytest.mark.slow
@pytest.mark.parametrize("preset", PRESETS)
@crit(2, "overfit smoke: H=64, 64 samples, MPJPE < 10% of epoch 0 within 500 epochs and 10 min")
def test_overfit_smoke(preset, request, tmp_path):
    _check_preset(request, preset)
    ds = generate_dataset(SMOKE_SAMPLES, 0, preset, feature_dim=64)
    model = model_for_dataset(ds, EncoderConfig.default(64), seed=0)
    assert model.cfg.widths == [67, 32, 16, 8, 3]
    assert (model.n_joints, model.n_coarse) == {"body": (14, 431), "hand": (21, 200)}[preset]
    t0 = time.perf_counter()
    res = train(model, ds, TrainConfig(**SMOKE_CFG), out_dir=tmp_path)
    elapsed = time.perf_counter() - t0
    start, end = res.initial_report.mpjpe, res.final_report.mpjpe
    print(f"epochs {res.epochs_run}, {elapsed:.0f} s, MPJPE {start:.1f} -> {end:.1f} mm ({end / start:.3f})")
    assert end < 0.1 * start
    assert res.epochs_run <= 500
    assert elapsed < 600


@pytest.mark.parametrize("preset", PRESETS)
@crit(3, "MVM: mean masked share 0.15 +- 0.01 at cap 0.3; cap 0 equals plain forward")
def test_mvm_mechanics(preset, request):
    _check_preset(request, preset)
    m = _model(preset, H=32)
    N = m.n_joints + m.n_coarse
    mask = draw_mask(np.random.default_rng(0), 10000, N, 0.3)
    assert abs(mask.mean() - 0.15) < 0.01
    X = np.random.default_rng(1).standard_normal((3, 32))
    plain = m.forward(X)
    train_path = m.forward(X, rng=np.random.default_rng(2), mvm_max_fraction=0.0)
    for a, b in [(plain.joints3d, train_path.joints3d), (plain.full_vertices3d, train_path.full_vertices3d),
                 (plain.camera, train_path.camera)]:
        assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("preset", PRESETS)
@crit(4, "permutation equivariance over 50 permutations, max deviation < 1e-6")
def test_permutation_equivariance(preset, request):
    _check_preset(request, preset)
    m = _model(preset, dtype=np.float64, seed=3)
    rng = np.random.default_rng(4)
    for p in m.params.values():
        if not p.name.startswith("up."):
            p.data += 0.02 * rng.standard_normal(p.shape)
    pos = m.positions()
    N = len(pos)
    X = rng.standard_normal((1, 64))
    mask = draw_mask(rng, 1, N, 0.3)
    tok = m.params["mask_token"]
    base = m.encoder_forward(build_queries(X, pos, tok, m.n_joints, mask=mask))[1].data
    worst = 0.0
    for _ in range(50):
        perm = rng.permutation(N)
        out = m.encoder_forward(build_queries(X, pos[perm], tok, m.n_joints, mask=mask[:, perm]))[1].data
        worst = max(worst, float(np.abs(out - base[:, perm]).max()))
    print(f"max deviation {worst:.2e}")
    assert worst < 1e-6


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.mark.parametrize("preset", PRESETS)
@crit(5, "metric oracles: Procrustes, PA-MPJPE <= MPJPE, brute-force F-score")
def test_metric_oracles(preset, request, body_data, hand_data):
    _check_preset(request, preset)
    data = body_data if preset == "body" else hand_data
    rng = np.random.default_rng(5)
    joints = data.records["joints"].astype(np.float64)
    for i in range(100):
        gt = joints[i % len(joints)]
        pred = rng.uniform(0.5, 2.0) * gt @ _random_rotation(rng).T + rng.standard_normal(3)
        assert pa_mpjpe(pred, gt) < 1e-6
    for n in range(1, 9):
        for _ in range(25):
            a, b = rng.uniform(0, 0.03, (n, 3)), rng.uniform(0, 0.03, (n, 3))
            da = np.array([np.linalg.norm(b - p, axis=1).min() for p in a])
            db = np.array([np.linalg.norm(a - q, axis=1).min() for q in b])
            for th in (5.0, 15.0):
                pr, rc = (da < th / 1000).mean(), (db < th / 1000).mean()
                expected = 0.0 if pr + rc == 0 else 2 * pr * rc / (pr + rc)
                assert f_score(a, b, th) == expected
    K = joints.shape[1]
    worse = []
    for _ in range(1000):
        gt = rng.standard_normal((K, 3)) * 0.3
        pred = gt + rng.standard_normal((K, 3)) * rng.uniform(0.001, 1.0)
        if pa_mpjpe(pred, gt) > mpjpe(pred, gt) + 1e-9:
            worse.append(pa_mpjpe(pred, gt) - mpjpe(pred, gt))
    # least-squares alignment need not lower the mean distance; see README
    assert not worse, f"{len(worse)} of 1000 pairs have PA-MPJPE > MPJPE (max excess {max(worse):.3g} mm)"


@pytest.mark.parametrize("preset", PRESETS)
@crit(6, "loss identities: zero at pred == gt; alpha/beta flags zero the right gradients")
def test_loss_identities(preset, request):
    _check_preset(request, preset)
    b = get_preset(preset)
    cfg = EncoderConfig(8, [dict(hidden_dim=4, layers=1, heads=1)], upsampler_hidden=4)
    m = Metro.from_template(cfg, b.mesh, b.regressor, seed=0, dtype=np.float64)
    rng = np.random.default_rng(6)
    for p in m.params.values():
        p.data += 0.05 * rng.standard_normal(p.shape)
    X = rng.standard_normal((2, 8))
    out = m.forward(X)
    V = out.full_vertices3d.data.copy()
    J = m.regressor @ V
    out.joints3d.data[...] = J
    lb = total_loss(out, V, J, project_weak_perspective(J, out.camera.data), m.regressor)
    assert lb.l_v == 0 and lb.l_j == 0 and lb.l_j_proj == 0 and lb.l_j_reg < 1e-12

    V_gt = rng.standard_normal(V.shape)
    J_gt = rng.standard_normal(J.shape)
    J2_gt = rng.standard_normal(J.shape[:-1] + (2,))

    def grads(alpha, beta):
        m.zero_grad()
        o = m.forward(X)
        total_loss(o, V_gt, J_gt, J2_gt, m.regressor, alpha, beta).tensor.backward()
        return {k: (np.zeros(p.shape) if p.grad is None else p.grad) for k, p in m.params.items()}

    g = grads(0.0, 0.0)
    assert not any(v.any() for v in g.values())
    g = grads(0.0, 1.0)
    assert not any(g[k].any() for k in g if k.startswith("up."))
    g = grads(1.0, 0.0)
    assert not g["cam.w"].any() and not g["cam.b"].any()
    g = grads(1.0, 1.0)
    assert g["cam.b"].any() and g["up.lin.w"].any()


@pytest.mark.parametrize("preset", PRESETS)
@crit(7, "attention rows sum to 1 within 1e-6; aggregate (K+M)^2; CSV round trip at 1e-9")
def test_attention_contract(preset, request, tmp_path):
    _check_preset(request, preset)
    ds = generate_dataset(4, 1, preset, feature_dim=64)
    m = model_for_dataset(ds, EncoderConfig.default(64), seed=0)
    out = m.forward(ds.records["feature"], retain_attention=True)
    N = m.n_joints + m.n_coarse
    for a in out.attention:
        assert np.abs(a.astype(np.float64).sum(-1) - 1).max() < 1e-6
    A = predict(m, ds, retain_attention=True)["attention_last"]
    assert A.shape == (N, N)
    if preset == "body":
        assert A.shape == (445, 445)
    np.testing.assert_allclose(A, average_attention([out.attention[-1]]), atol=1e-12)
    save_matrix_csv(tmp_path / "att.csv", A)
    assert np.abs(load_matrix_csv(tmp_path / "att.csv") - A).max() < 1e-9


@crit(8, "ablation: cap sweep 0..50% and four width schemes with 12 layers, complete CSVs without NaN")
def test_ablation_harness(tmp_path):
    data = tmp_path / "d.mtrd"
    assert run(["gen-data", "--preset", "hand", "--n", "4", "--feature-dim", "32", "--output", str(data),
                "--out-dir", str(tmp_path)]) == 0
    assert run(["ablate", "--data", str(data), "--epochs", "1", "--batch-size", "4", "--heads", "1",
                "--upsampler-hidden", "4", "--out-dir", str(tmp_path)]) == 0
    mvm = np.genfromtxt(tmp_path / "ablate_mvm.csv", delimiter=",", names=True)
    assert list(mvm["max_mask_fraction"]) == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
    with open(tmp_path / "ablate_dims.csv") as fh:
        rows = fh.read().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["(H+3) -> 3", "(H+3) -> H/2 -> 3", "(H+3) -> H/2 -> H/4 -> 3",
                                                  "(H+3) -> H/2 -> H/4 -> H/8 -> 3"]
    assert all(r.split(",")[2] == "12" for r in rows[1:])
    text = (tmp_path / "ablate_mvm.csv").read_text() + "\n".join(rows)
    assert "nan" not in text.lower() and ",," not in text


@crit(9, "persistence: checkpoint and dataset round-trip bitwise; reload reproduces MetricReport")
def test_persistence(tmp_path, body_data):
    body_data.save(tmp_path / "a.mtrd")
    back = Dataset.load(tmp_path / "a.mtrd")
    back.save(tmp_path / "b.mtrd")
    assert (tmp_path / "a.mtrd").read_bytes() == (tmp_path / "b.mtrd").read_bytes()
    m = model_for_dataset(body_data, EncoderConfig.scheme(16, 2), seed=0)
    train(m, body_data, TrainConfig(epochs=1, batch_size=6, lr_initial=1e-3, eval_every=0))
    save_checkpoint(tmp_path / "m.ckpt", m)
    m2, _ = load_checkpoint(tmp_path / "m.ckpt")
    save_checkpoint(tmp_path / "m2.ckpt", m2)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
    assert evaluate(m, back) == evaluate(m2, back)


@crit(10, "hand preset satisfies criteria 1-7")
def test_hand_preset_trains(tmp_path):
    data = tmp_path / "hand.mtrd"
    assert run(["gen-data", "--preset", "hand", "--n", "8", "--feature-dim", "32", "--output", str(data),
                "--out-dir", str(tmp_path)]) == 0
    assert run(["train", "--data", str(data), "--epochs", "3", "--batch-size", "4", "--lr", "1e-3",
                "--out-dir", str(tmp_path / "run")]) == 0
    m, _ = load_checkpoint(tmp_path / "run" / "model.ckpt")
    assert m.n_joints == 21
    rep = evaluate(m, Dataset.load(data))
    assert np.isfinite([rep.mpjpe, rep.pa_mpjpe, rep.mpve]).all()

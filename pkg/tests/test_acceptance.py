"""Acceptance suite: thirteen numbered end-to-end checks, one test (and one
printed PASS line) per criterion.

Heavy fixtures (the 100-frame 64x64 evaluation set, classical
reconstructions of it, and six trained models) are computed once per session.
Set AGDEBLUR_TEST_CACHE=/some/dir to persist them across runs while
iterating; without it everything is rebuilt in a temporary directory.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from agdeblur import (classical, cli, datagen, encoder, nn, quality, spiral,
                      tensors, training)
from test_quality import ref_hfen, ref_psnr, ref_ssim

READOUTS = spiral.READOUT_LENGTHS_S
N_EVAL_FRAMES = 100
EVAL_SEED = 77
TRAIN_SEEDS = (0, 1, 2)
TRAIN_EPOCHS = 30
TRAIN_BUDGET_S = 30 * 60


def report(n, detail):
    print(f"CRITERION {n:2d}: PASS - {detail}")


def _cache_dir(tmp_path_factory, name):
    root = os.environ.get("AGDEBLUR_TEST_CACHE")
    if root:
        d = os.path.join(root, name)
        os.makedirs(d, exist_ok=True)
        return d
    return str(tmp_path_factory.mktemp(name))


# --- heavy fixtures ----------------------------------------------------------

@pytest.fixture(scope="session")
def eval_frames(tmp_path_factory):
    """100 phantoms at 64x64: per frame and readout, the ground-truth and
    blurred reconstructions; for the longest readout also the raw k-space
    and the augmented field map."""
    cache = _cache_dir(tmp_path_factory, "eval_frames")
    rng = tensors.Rng(tensors.derive_seed(EVAL_SEED, "accept/desk"))
    frames = []
    for i in range(N_EVAL_FRAMES):
        ph_rng = rng.spawn(f"phantom/{i}")
        draw = rng.spawn(f"aug/{i}")
        alpha = draw.uniform(0.0, 3.15)
        beta = draw.uniform(-200.0, 200.0)
        path = os.path.join(cache, f"frame{i:03d}.npz")
        if os.path.exists(path):
            frames.append(dict(np.load(path)))
            continue
        ph = datagen.make_phantom(64, 64, ph_rng)
        fmap = encoder.augment_field_map(
            ph.fieldmap, encoder.AugmentationParams(alpha=alpha, beta=beta))
        rec = {"fmap": fmap}
        for T in READOUTS:
            traj = spiral.make_spiral(64, 20.0, T)
            ksp = encoder.forward(ph.image, fmap, traj)
            clean = encoder.forward(ph.image, np.zeros_like(fmap), traj)
            target = encoder.cg_recon(clean, None, iters=30, tol=1e-4)
            blurred = encoder.cg_recon(ksp, None, iters=30, tol=1e-4)
            key = f"{T * 1e3:.3f}"
            rec[f"target/{key}"] = target
            rec[f"blurred/{key}"] = blurred
            if T == READOUTS[-1]:
                rec["ksp"] = ksp.samples
        np.savez(path, **rec)
        frames.append(rec)
    return frames


@pytest.fixture(scope="session")
def classical_results(tmp_path_factory, eval_frames):
    """Iterative and interpolation-based corrections of every evaluation
    frame at the longest readout, using the true field map."""
    cache = _cache_dir(tmp_path_factory, "classical")
    traj = spiral.make_spiral(64, 20.0, READOUTS[-1])
    out = []
    for i, rec in enumerate(eval_frames):
        path = os.path.join(cache, f"cls{i:03d}.npz")
        if os.path.exists(path):
            out.append(dict(np.load(path)))
            continue
        fmap = rec["fmap"]
        ksp = encoder.KspaceData(rec["ksp"], traj)
        ir, _ = classical.ir_deblur(ksp, fmap, iters=15)
        plan = classical.plan_mfi(traj, min(fmap.min(), 0.0) - 1.0,
                                  max(fmap.max(), 0.0) + 1.0)
        mfi = classical.mfi_deblur(ksp, fmap, plan, basis="cg")
        res = {"ir": ir, "mfi": mfi}
        np.savez(path, **res)
        out.append(res)
    return out


@pytest.fixture(scope="session")
def train_dataset(tmp_path_factory):
    """Group-disjoint 64x64 training dataset (120 frames, mixed readouts)."""
    out = _cache_dir(tmp_path_factory, "train_ds")
    manifest_path = os.path.join(out, "manifest.json")
    if not os.path.exists(manifest_path):
        cfg = datagen.DatasetConfig(n_groups=6, frames_per_group=20, seed=42)
        datagen.build_dataset(cfg, out)
    return out


def _load_pairs(ds_dir, role):
    manifest = datagen.load_manifest(os.path.join(ds_dir, "manifest.json"))
    pairs = []
    for e in datagen.manifest_entries(manifest, role):
        inp = tensors.load_tensor(os.path.join(ds_dir, e.input_path))
        tgt = tensors.load_tensor(os.path.join(ds_dir, e.target_path))
        pairs.append((inp, tgt))
    return pairs


@pytest.fixture(scope="session")
def trained_models(tmp_path_factory, train_dataset):
    """CNN and gated models trained for three seeds each; per-run wall time
    recorded alongside the checkpoint."""
    cache = _cache_dir(tmp_path_factory, "trained")
    train_pairs = _load_pairs(train_dataset, "train")
    val_pairs = _load_pairs(train_dataset, "val")
    train_set = [training.prepare_sample(i, t)[:2] for i, t in train_pairs]
    val_set = [training.prepare_sample(i, t)[:2] for i, t in val_pairs]
    runs = {}
    for seed in TRAIN_SEEDS:
        for name, (f1, f2) in (("cnn", (0, 0)), ("agcnn", (3, 3))):
            ck = os.path.join(cache, f"{name}_s{seed}")
            if not os.path.exists(os.path.join(ck, "model.json")):
                model = nn.AgCnnModel(f1=f1, f2=f2)
                nn.init_weights(model, tensors.Rng(
                    tensors.derive_seed(seed, f"accept/{name}/init")))
                tcfg = training.TrainConfig(
                    epochs=TRAIN_EPOCHS, batch_size=16, lr=1e-3,
                    seed=tensors.derive_seed(seed, f"accept/{name}/shuffle"))
                t0 = time.time()
                model, log = training.train(model, train_set, val_set, tcfg)
                elapsed = time.time() - t0
                training.save_checkpoint(ck, model,
                                         meta={"elapsed_s": elapsed,
                                               "seed": seed}, log=log)
            model, sidecar = training.load_checkpoint(ck)
            runs[(name, seed)] = (model, sidecar["meta"]["elapsed_s"])
    return runs, train_dataset


# --- criteria ----------------------------------------------------------------

class TestArchitecture:
    def test_criterion_01_parameter_count(self):
        model = nn.AgCnnModel(f1=0, f2=0)
        count = nn.param_count(model)
        assert count == 61730
        report(1, f"base model has exactly {count} parameters")

    def test_criterion_02_gate_overhead_and_ordering(self):
        counts = {(a, b): nn.param_count(nn.AgCnnModel(f1=a, f2=b))
                  for a, b in ((3, 3), (3, 1), (5, 5), (5, 3), (5, 1))}
        assert 68000 <= counts[(3, 3)] <= 68700
        assert counts[(5, 5)] > counts[(5, 3)] > counts[(5, 1)]
        assert counts[(3, 3)] > counts[(3, 1)]
        report(2, f"gated (3,3) model has {counts[(3, 3)]} parameters; "
                  "size ordering follows filter sizes")


def _fd_grad(fn, arr, eps=1e-6):
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


class TestGradients:
    def test_criterion_03_gradient_checks(self):
        rng = np.random.default_rng(123)
        results = {}

        def check_layer(label, layer, cin, scale=1.0):
            x = rng.normal(size=(2, 6, 6, cin)) * scale
            dy_seed = None

            def loss_of():
                y = layer.forward(x)[0]
                return float(np.sum(y * dy_seed))

            y0, cache = layer.forward(x)[:2]
            dy_seed = rng.normal(size=y0.shape)
            _, grads = layer.backward(cache, dy_seed)
            worst = 0.0
            for name, arr in layer.params().items():
                fd = _fd_grad(loss_of, arr)
                worst = max(worst, _rel_err(grads[name], fd))
            results[label] = worst
            assert worst < 1e-5, f"{label}: rel err {worst}"

        conv = nn.ConvLayer(3, 3, 2, 3)
        _init_layer(conv, rng)
        check_layer("conv", conv, 2)

        ds = nn.DepthwiseSeparableConv(3, 4, 2)
        _init_layer(ds, rng)
        check_layer("depthwise-separable", ds, 4)

        ag = nn.AttentionGate(4, 3, reduction=2)
        _init_layer(ag, rng)
        x = rng.normal(size=(2, 6, 6, 4))
        y0, _, cache = ag.forward(x)
        dy = rng.normal(size=y0.shape)
        _, grads = ag.backward(cache, dy)

        def ag_loss():
            return float(np.sum(ag.forward(x)[0] * dy))
        worst = max(_rel_err(grads[k], _fd_grad(ag_loss, arr))
                    for k, arr in ag.params().items())
        results["attention-gate"] = worst
        assert worst < 1e-5

        model = nn.AgCnnModel(in_channels=2, c1=4, c2=4, f1=3, f2=3,
                              kernels=(3, 3, 1))
        nn.init_weights(model, tensors.Rng(3))
        xm = rng.normal(size=(1, 8, 8, 2))
        ym, cache = model.forward(xm)
        dym = rng.normal(size=ym.shape)
        _, grads = model.backward(cache, dym)

        def model_loss():
            return float(np.sum(model.forward(xm)[0] * dym))
        worst = max(_rel_err(grads[k], _fd_grad(model_loss, arr))
                    for k, arr in model.params().items())
        results["model"] = worst
        assert worst < 1e-5

        pred = rng.normal(size=(1, 8, 8, 2))
        tgt = rng.normal(size=(1, 8, 8, 2))
        _, dpred = nn.loss_l1_gdl(pred, tgt)
        fd = _fd_grad(lambda: nn.loss_l1_gdl(pred, tgt)[0], pred)
        loss_err = _rel_err(dpred, fd)
        results["loss"] = loss_err
        assert loss_err < 1e-4

        detail = ", ".join(f"{k} {v:.1e}" for k, v in results.items())
        report(3, f"analytic vs finite-difference rel errors: {detail}")


def _init_layer(layer, rng):
    for arr in layer.params().values():
        arr[...] = rng.normal(size=arr.shape) * 0.3
    return layer


class TestForwardModel:
    def test_criterion_04_brute_force_oracle_and_adjoint(self):
        rng = np.random.default_rng(7)
        traj = spiral.make_spiral(16, 20.0, READOUTS[0])
        img = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
        fmap = 120.0 * rng.normal(size=(16, 16))
        ksp = encoder.forward(img, fmap, traj)
        # independent double-loop direct summation
        brute = np.zeros(traj.n_samples, dtype=complex)
        for s in range(traj.n_samples):
            acc = 0.0
            for r in range(16):
                for c in range(16):
                    x = (c + 0.5) / 16 - 0.5
                    y = (r + 0.5) / 16 - 0.5
                    phase = (-2j * np.pi
                             * (fmap[r, c] * traj.t[s]
                                + (traj.kx[s] * x + traj.ky[s] * y) * 20.0))
                    acc += img[r, c] * np.exp(phase)
            brute[s] = acc
        rel = _rel_err(ksp.samples, brute)
        assert rel < 1e-12
        op = encoder.EncodingOperator(traj, (16, 16), fmap)
        m = (rng.normal(size=256) + 1j * rng.normal(size=256))
        s = (rng.normal(size=traj.n_samples)
             + 1j * rng.normal(size=traj.n_samples))
        lhs = np.vdot(s, op.apply(m))
        rhs = np.vdot(op.apply_adjoint(s), m)
        adj = abs(lhs - rhs) / (np.linalg.norm(m) * np.linalg.norm(s))
        assert adj < 1e-10
        report(4, f"forward vs brute-force rel err {rel:.2e}; "
                  f"adjoint mismatch {adj:.2e}")

    def test_criterion_05_round_trip(self):
        traj = spiral.make_spiral(32, 20.0, READOUTS[0])
        op = encoder.EncodingOperator(traj, (32, 32))
        E = op._e if op._e is not None else np.stack(
            [op.apply(row) for row in np.eye(1024, dtype=complex)], axis=1)
        _, sv, vh = np.linalg.svd(E, full_matrices=False)
        ph = datagen.make_phantom(32, 32, tensors.Rng(11))
        img = datagen.bandlimit(ph.image, sigma=1.5).reshape(-1)
        # keep only the well-conditioned subspace the trajectory samples
        keep = sv >= sv[0] / 8.0
        basis = vh[keep].conj().T
        img = (basis @ (basis.conj().T @ img)).reshape(32, 32)
        ksp = encoder.forward(img, np.zeros((32, 32)), traj)
        rec = encoder.cg_recon(ksp, None, iters=30, tol=0.0)
        nrmse = np.linalg.norm(rec - img) / np.linalg.norm(img)
        p = quality.psnr(np.abs(img), np.abs(rec))
        assert nrmse < 1e-3
        assert p > 40.0
        report(5, f"zero-field CG round trip NRMSE {nrmse:.2e}, "
                  f"PSNR {p:.1f} dB in 30 iterations")


class TestClassicalCorrection:
    def test_criterion_06_mfi_exactness_at_basis_frequency(self):
        traj = spiral.make_spiral(32, 20.0, READOUTS[-1])
        plan = classical.plan_mfi(traj, -200.0, 200.0, num_basis=5)
        f0 = float(plan.basis_freqs[2])
        rng = np.random.default_rng(21)
        img = rng.normal(size=(32, 32)) + 1j * rng.normal(size=(32, 32))
        fmap = np.full((32, 32), f0)
        ksp = encoder.forward(img, fmap, traj)
        out = classical.mfi_deblur(ksp, fmap, plan, basis="adjoint")
        direct = encoder.adjoint(ksp, demod_hz=f0)
        rel = _rel_err(out, direct)
        assert rel < 1e-6
        report(6, f"constant-field interpolation equals single demodulation "
                  f"to rel err {rel:.2e}")

    @pytest.mark.slow
    def test_criterion_07_blur_monotone_in_readout(self, eval_frames):
        means = []
        for T in READOUTS:
            key = f"{T * 1e3:.3f}"
            vals = [quality.psnr(np.abs(rec[f"target/{key}"]),
                                 np.abs(rec[f"blurred/{key}"]))
                    for rec in eval_frames]
            means.append(float(np.mean(vals)))
        assert all(means[i] > means[i + 1] for i in range(len(means) - 1)), means
        report(7, "mean blurred PSNR decreases with readout: "
                  + " > ".join(f"{m:.2f}" for m in means) + " dB")

    @pytest.mark.slow
    def test_criterion_08_method_ordering(self, eval_frames, classical_results):
        key = f"{READOUTS[-1] * 1e3:.3f}"
        blurred, mfi, ir = [], [], []
        for rec, cls in zip(eval_frames, classical_results):
            tgt = np.abs(rec[f"target/{key}"])
            blurred.append(quality.psnr(tgt, np.abs(rec[f"blurred/{key}"])))
            mfi.append(quality.psnr(tgt, np.abs(cls["mfi"])))
            ir.append(quality.psnr(tgt, np.abs(cls["ir"])))
        mb, mm, mi = np.mean(blurred), np.mean(mfi), np.mean(ir)
        assert len(blurred) >= 100
        assert mi >= mm >= mb
        assert mi >= mb + 5.0
        report(8, f"mean PSNR over {len(blurred)} frames: "
                  f"iterative {mi:.2f} >= interpolation {mm:.2f} >= "
                  f"blurred {mb:.2f} dB (gap {mi - mb:.1f} dB)")


def _test_metrics(runs, ds_dir, name, seed):
    model, _ = runs[(name, seed)]
    pairs = _load_pairs(ds_dir, "test")
    ps, ss, hf = [], [], []
    for inp, tgt in pairs:
        pred = training.apply_model(model, inp)
        ps.append(quality.psnr(np.abs(tgt), np.abs(pred)))
        ss.append(quality.ssim(np.abs(tgt), np.abs(pred)))
        hf.append(quality.hfen(np.abs(tgt), np.abs(pred)))
    return float(np.mean(ps)), float(np.mean(ss)), float(np.mean(hf))


class TestLearnedCorrection:
    @pytest.mark.slow
    def test_criterion_09_learning_efficacy(self, trained_models):
        runs, ds_dir = trained_models
        for (name, seed), (_, elapsed) in runs.items():
            assert elapsed <= TRAIN_BUDGET_S, \
                f"{name} seed {seed} took {elapsed:.0f}s"
        pairs = _load_pairs(ds_dir, "test")
        blurred_psnr = float(np.mean(
            [quality.psnr(np.abs(t), np.abs(i)) for i, t in pairs]))
        blurred_ssim = float(np.mean(
            [quality.ssim(np.abs(t), np.abs(i)) for i, t in pairs]))
        blurred_hfen = float(np.mean(
            [quality.hfen(np.abs(t), np.abs(i)) for i, t in pairs]))
        agg = {}
        for name in ("cnn", "agcnn"):
            per_seed = [_test_metrics(runs, ds_dir, name, s)
                        for s in TRAIN_SEEDS]
            agg[name] = tuple(float(np.mean([m[i] for m in per_seed]))
                              for i in range(3))
        ag_p, ag_s, ag_h = agg["agcnn"]
        cn_p, cn_s, cn_h = agg["cnn"]
        assert ag_p >= blurred_psnr + 3.0
        assert ag_p >= cn_p + 0.2
        # SSIM and HFEN move the same way as PSNR
        assert ag_s > blurred_ssim and ag_s >= cn_s
        assert ag_h < blurred_hfen and ag_h <= cn_h
        report(9, f"3-seed means: gated {ag_p:.2f} dB / plain {cn_p:.2f} dB / "
                  f"blurred {blurred_psnr:.2f} dB; SSIM {ag_s:.3f} vs "
                  f"{cn_s:.3f}, HFEN {ag_h:.3f} vs {cn_h:.3f}")

    @pytest.mark.slow
    def test_criterion_10_gate_range(self, trained_models):
        runs, ds_dir = trained_models
        model, _ = runs[("agcnn", TRAIN_SEEDS[0])]
        pairs = _load_pairs(ds_dir, "test")
        n_vals = 0
        for inp, _ in pairs:
            x = tensors.complex_to_channels(inp)[None]
            x = x / training.frame_scale(inp)
            _, cache = model.forward(x)
            gates = cache["gates"]
            assert gates, "model emitted no attention maps"
            for g in gates:
                assert np.all(g >= 0.0) and np.all(g <= 1.0)
                n_vals += g.size
        report(10, f"all {n_vals} attention-map values over the test set "
                   "lie in [0, 1]")

    def test_criterion_11_inference_speed(self, tmp_path):
        out = tmp_path / "bench.json"
        code = cli.main(["bench", "--size", "64", "--iters", "15",
                         "--frames", "3", "--warmup", "1", "--threads", "1",
                         "--out", str(out)])
        assert code == 0
        rep = json.load(open(out))
        assert rep["speedup"] >= 2.0
        report(11, f"network inference {rep['agcnn_s_per_frame'] * 1e3:.0f} ms"
                   f"/frame vs 15-iteration solver "
                   f"{rep['ir_s_per_frame'] * 1e3:.0f} ms/frame "
                   f"({rep['speedup']:.1f}x)")


class TestMetricsAndRepro:
    def test_criterion_12_metric_sanity(self):
        rng = np.random.default_rng(31)
        x = rng.uniform(0.1, 1.0, size=(32, 32))
        assert quality.psnr(x, x.copy()) == 99.0
        assert quality.ssim(x, x.copy()) == pytest.approx(1.0)
        assert quality.hfen(x, x.copy()) == pytest.approx(0.0, abs=1e-12)
        worst = 0.0
        for _ in range(10):
            ref = np.abs(rng.normal(size=(32, 32))) + 0.1
            test = np.abs(ref + 0.05 * rng.normal(size=(32, 32)))
            worst = max(
                worst,
                abs(quality.psnr(ref, test) - ref_psnr(ref, test)),
                abs(quality.ssim(ref, test) - ref_ssim(ref, test)),
                abs(quality.hfen(ref, test) - ref_hfen(ref, test)))
        assert worst < 1e-9
        report(12, f"identical-input behavior correct; worst deviation from "
                   f"independent recomputation {worst:.1e}")

    def test_criterion_13_reproducibility(self, tmp_path):
        def one_run(root):
            ds = os.path.join(root, "ds")
            ck = os.path.join(root, "ck")
            base = [sys.executable, "-m", "agdeblur"]
            subprocess.run(base + ["synth", "--out", ds, "--groups", "3",
                                   "--frames", "2", "--size", "16",
                                   "--readouts", "2.52", "--seed", "13",
                                   "--threads", "1"],
                           check=True, capture_output=True)
            subprocess.run(base + ["train", "--data",
                                   os.path.join(ds, "manifest.json"),
                                   "--out", ck, "--model", "agcnn",
                                   "--f1", "3", "--f2", "3", "--epochs", "2",
                                   "--batch", "4", "--seed", "13",
                                   "--threads", "1"],
                           check=True, capture_output=True)
            manifest = open(os.path.join(ds, "manifest.json"), "rb").read()
            ckpts = {f: open(os.path.join(ck, f), "rb").read()
                     for f in sorted(os.listdir(ck)) if f.endswith(".spdb")}
            return manifest, ckpts

        m1, c1 = one_run(str(tmp_path / "run1"))
        m2, c2 = one_run(str(tmp_path / "run2"))
        assert m1 == m2
        assert set(c1) == set(c2) and c1
        for f in c1:
            assert c1[f] == c2[f], f
        report(13, f"repeat runs gave byte-identical manifests and "
                   f"bit-identical weights ({len(c1)} tensors)")

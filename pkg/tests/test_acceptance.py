"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 8 and 10 share a desk-scale run (3 toy classes x 100 images at 64x64,
``configs/desk.yaml``) that is trained twice to check bit-reproducibility.
Expect roughly a quarter of an hour on one CPU core.
"""
import hashlib
import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from lesion_synth._frozen import FrozenConvStack
from lesion_synth.cli import main
from lesion_synth.conditioning import MeasurementCodebook, MeasurementEncoder
from lesion_synth.config import load_config
from lesion_synth.data import DatasetManifest, load_samples
from lesion_synth.evaluation import compute_fid, inception_score
from lesion_synth.measurements import (FEATURE_NAMES, MeasurementNormalizer, extract_measurements, glcm,
                                       glcm_features, normalize)
from lesion_synth.pipeline import (ABLATION_FLAGS, Workspace, load_tokenizer, load_var, measure,
                                   setting_config)
from lesion_synth.tokenizer import lesion_focus_loss, quantize_multiscale, vqvae_loss
from lesion_synth.tokenizer.networks import PatchDiscriminator
from lesion_synth.var import NextScaleTransformer

from _oracles import brute_force_cascade, central_difference, exact_moment_sample

ROOT = Path(__file__).resolve().parents[1]
IDX = {n: i for i, n in enumerate(FEATURE_NAMES)}


@contextmanager
def criterion(pytestconfig, number, title):
    capture = pytestconfig.pluginmanager.getplugin("capturemanager")

    def say(line):
        with capture.global_and_fixture_disabled():
            print(f"\n{line}", flush=True)

    try:
        yield
    except BaseException as exc:
        detail = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        say(f"criterion {number:>2} FAIL  {title}: {detail[:200]}")
        raise
    say(f"criterion {number:>2} PASS  {title}")


def rel_err(analytic, numeric):
    a, b = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def grad(fn, x):
    t = torch.as_tensor(x, dtype=torch.float64).requires_grad_(True)
    fn(t).backward()
    return t.grad.numpy()


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------- 1 - 7


def test_c01_quantizer_matches_brute_force(pytestconfig):
    with criterion(pytestconfig, 1, "multi-scale quantizer equals brute-force cascade on 200 latents"):
        start = time.perf_counter()
        scales = [(1, 1), (2, 2), (4, 4)]
        mismatches = 0
        for seed in range(200):
            rng = np.random.default_rng(seed)
            f = rng.normal(size=(2, 4, 4))
            cb = rng.normal(size=(int(rng.integers(2, 5)), 2))
            pyr, _ = quantize_multiscale(torch.as_tensor(f)[None], torch.as_tensor(cb), scales)
            ref, _ = brute_force_cascade(f, cb, scales)
            mismatches += sum(not np.array_equal(p[0].numpy(), r) for p, r in zip(pyr, ref))
        elapsed = time.perf_counter() - start
        assert mismatches == 0, f"{mismatches} scale grids disagree"
        assert elapsed < 10, f"took {elapsed:.1f}s"


def test_c02_loss_identities(pytestconfig):
    with criterion(pytestconfig, 2, "lesion-focus mask identities and total-loss decomposition"):
        scales = [(1, 1), (2, 2), (4, 4)]
        for seed in range(100):
            rng = np.random.default_rng(seed)
            real = [torch.as_tensor(rng.normal(size=(2, 4, h, w))) for h, w in scales]
            recon = [torch.as_tensor(rng.normal(size=(2, 4, h, w))) for h, w in scales]
            ones = [torch.ones(2, 1, h, w, dtype=torch.float64) for h, w in scales]
            zeros = [torch.zeros(2, 1, h, w, dtype=torch.float64) for h, w in scales]
            assert float(lesion_focus_loss(real, recon, ones)) == 0.0
            full = sum(float(((r - q) ** 2).mean()) for r, q in zip(real, recon))
            assert math.isclose(float(lesion_focus_loss(real, recon, zeros)), full, rel_tol=1e-12)

            torch.manual_seed(seed)
            lam_p, lam_g = rng.uniform(0, 3, size=2)
            masks = [(torch.rand(2, 1, h, w) > 0.5).double() for h, w in scales]
            out = vqvae_loss(torch.as_tensor(rng.random((2, 3, 8, 8))), torch.as_tensor(rng.random((2, 3, 8, 8))),
                             real, recon, torch.as_tensor(rng.normal(size=(2, 4, 4, 4))),
                             torch.as_tensor(rng.normal(size=(2, 4, 4, 4))), masks,
                             lambda_perceptual=lam_p, lambda_adversarial=lam_g,
                             perceptual_net=FrozenConvStack((4, 8)).double(),
                             discriminator=PatchDiscriminator(3, 8, 1).double())
            v = out.as_floats()
            parts = v["pixel"] + v["lesion_focus"] + v["feature"] + lam_p * v["perceptual"] + lam_g * v["adversarial"]
            assert abs(v["total"] - parts) <= 1e-8


def test_c03_gradient_checks(pytestconfig):
    with criterion(pytestconfig, 3, "loss gradients and encoder Jacobian match central differences"):
        rng = np.random.default_rng(0)
        I = torch.as_tensor(rng.random((1, 3, 8, 8)))
        f = torch.as_tensor(rng.normal(size=(1, 4, 2, 2)))
        codes = [torch.zeros(1, 4, 1, 1, dtype=torch.float64)]
        mask0 = [torch.zeros(1, 1, 1, 1, dtype=torch.float64)]
        probes = {
            "pixel": (lambda t: vqvae_loss(I, t, codes, codes, f, f, mask0).pixel, rng.random((1, 3, 8, 8))),
            "feature": (lambda t: vqvae_loss(I, I, codes, codes, f, t, mask0).feature,
                        rng.normal(size=(1, 4, 2, 2))),
        }
        scales = [(1, 1), (2, 2), (4, 4), (8, 8)]
        real = [torch.as_tensor(rng.normal(size=(1, 2, h, w))) for h, w in scales]
        masks = [(torch.as_tensor(rng.random((1, 1, h, w))) > 0.4).double() for h, w in scales]
        sizes = [int(np.prod(c.shape)) for c in real]

        def lesion(flat):
            parts = list(torch.split(flat, sizes))
            return lesion_focus_loss(real, [p.reshape(c.shape) for p, c in zip(parts, real)], masks)

        probes["lesion_focus"] = (lesion, rng.normal(size=sum(sizes)))
        for name, (fn, x0) in probes.items():
            numeric = central_difference(lambda a: float(fn(torch.as_tensor(a))), x0)
            err = rel_err(grad(fn, x0), numeric)
            assert err < 1e-4, f"{name}: relative error {err:.2e}"

        torch.manual_seed(0)
        enc = MeasurementEncoder(14, 8).double().eval().requires_grad_(False)
        v0 = rng.normal(size=14)
        J = torch.autograd.functional.jacobian(enc, torch.as_tensor(v0)).numpy()
        for r in range(8):
            numeric = central_difference(lambda a: float(enc(torch.as_tensor(a))[r]), v0)
            assert rel_err(J[r], numeric) < 1e-4, f"Jacobian row {r}"


def test_c04_measurement_golden_cases(pytestconfig):
    with criterion(pytestconfig, 4, "measurement golden cases and invariance fuzz"):
        gray = lambda g: np.repeat(np.asarray(g, float)[..., None], 3, axis=2)  # noqa: E731
        mask = np.zeros((32, 32), np.uint8)
        mask[8:20, 10:26] = 1
        v = extract_measurements(gray(np.full((32, 32), 0.5)), mask)
        for name, want in [("intensity_std", 0), ("intensity_entropy_bits", 0), ("glcm_energy", 1),
                           ("glcm_contrast", 0), ("glcm_homogeneity", 1)]:
            assert v[IDX[name]] == want, name

        square = np.zeros((40, 40), np.uint8)
        square[5:35, 5:35] = 1
        circ = extract_measurements(gray(np.random.default_rng(0).random((40, 40))), square)[IDX["circularity"]]
        assert abs(circ - math.pi / 4) <= 0.02

        P, _ = glcm(np.array([[0.0, 0.0], [1.0, 1.0]]), np.ones((2, 2), bool), 2, offsets=((0, 1),))
        assert P.tolist() == [[0.5, 0.0], [0.0, 0.5]]
        assert glcm_features(P) == (0.0, 1.0, 0.5, 1.0)

        rng = np.random.default_rng(1)
        shift_bad = offmask_bad = 0
        for _ in range(1000):
            img, m = np.zeros((32, 32, 3)), np.zeros((32, 32), np.uint8)
            m[8:24, 8:24] = rng.random((16, 16)) < 0.6
            m[16, 16] = 1
            img[8:24, 8:24] = rng.random((16, 16, 3))
            dy, dx = rng.integers(-8, 9, size=2)
            a = extract_measurements(img, m)
            b = extract_measurements(np.roll(img, (dy, dx), (0, 1)), np.roll(m, (dy, dx), (0, 1)))
            shift_bad += not np.allclose(a, b, rtol=1e-9, atol=1e-12)
            noisy = img.copy()
            noisy[m == 0] = rng.random(((m == 0).sum(), 3))
            offmask_bad += not np.array_equal(a, extract_measurements(noisy, m))
        assert shift_bad == 0 and offmask_bad == 0, (shift_bad, offmask_bad)


def test_c05_codebook_exactness(pytestconfig, tmp_path):
    with criterion(pytestconfig, 5, "codebook running mean equals insertion log; bit-exact round trip"):
        rng = np.random.default_rng(0)
        cb = MeasurementCodebook(n_classes=4)
        log = {c: [] for c in range(4)}
        for _ in range(1000):
            c, v = int(rng.integers(4)), rng.normal(size=14) * rng.uniform(0.1, 100)
            cb.update(c, v)
            log[c].append(v)
        for c, vs in log.items():
            assert np.max(np.abs(cb.query(c) - np.mean(vs, axis=0))) <= 1e-12, c
        back = MeasurementCodebook.load(cb.save(tmp_path / "codebook.csv"))
        assert np.array_equal(back.means_, cb.means_) and np.array_equal(back.counts_, cb.counts_)


def test_c06_block_causality(pytestconfig):
    with criterion(pytestconfig, 6, "block-causal attention: exact zero gradients and perturbation probes"):
        start = time.perf_counter()
        scales = [(1, 1), (2, 2)]
        torch.manual_seed(0)
        model = NextScaleTransformer(3, torch.randn(6, 3), scales, scales[-1], width=16, depth=2,
                                     heads=2).double().eval()
        rng = np.random.default_rng(0)
        pyr = [torch.as_tensor(rng.integers(0, 6, size=(2, h, w))) for h, w in scales]
        cond = model.condition_tokens(torch.tensor([0, 1]), torch.randn(2, 14, dtype=torch.float64))
        inputs = [c.requires_grad_(True) for c in model.embed_codes(pyr)]
        logits = model(cond, inputs)
        for k in range(len(scales)):
            grads = torch.autograd.grad(logits[:, model.scale_slice(k)].sum(), inputs, allow_unused=True,
                                        retain_graph=True)
            for j, g in enumerate(grads):
                if j >= k:
                    assert g is None or torch.count_nonzero(g) == 0, (k, j)
            if k > 0:
                assert any(g is not None and torch.count_nonzero(g) > 0 for g in grads[:k]), k
        with torch.no_grad():
            base = model(cond, model.embed_codes(pyr))
            for k in range(len(scales)):
                pert = [p.clone() for p in pyr]
                pert[k] = (pert[k] + 1) % 6
                out = model(cond, model.embed_codes(pert))
                assert torch.equal(out[:, :model.scale_slice(k).stop], base[:, :model.scale_slice(k).stop])
        assert time.perf_counter() - start < 30


def test_c07_metric_exactness(pytestconfig):
    with criterion(pytestconfig, 7, "FID and IS exact cases"):
        rng = np.random.default_rng(0)
        A, B = rng.normal(size=(40, 6)), rng.normal(1, 2, size=(50, 6))
        assert compute_fid(A, A) <= 1e-6
        assert abs(compute_fid(exact_moment_sample(0.0, 1.0, 30), exact_moment_sample(1.0, 1.0, 30)) - 1.0) <= 1e-6
        assert abs(compute_fid(A, B) - compute_fid(B, A)) <= 1e-8
        # "exact" here means to within a few ulps of the closed form
        assert abs(inception_score(np.full((30, 5), 0.2))[0] - 1.0) <= 1e-12
        assert abs(inception_score(np.tile(np.eye(5), (4, 1)), num_splits=4)[0] - 5.0) <= 1e-12


# ------------------------------------------------------------- 8 and 10


def _desk_run(out):
    start = time.perf_counter()
    for cmd in ("make-toy", "train-vqvae", "train-var", "build-codebook", "evaluate"):
        code = main([cmd, "--config", str(ROOT / "configs" / "desk.yaml"), "--out", str(out), "-q"])
        assert code == 0, f"{cmd} exited with {code}"
    return time.perf_counter() - start


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    elapsed = _desk_run(out)
    ws = Workspace(load_config(ROOT / "configs" / "desk.yaml", environ={}), out)
    return ws, elapsed


@pytest.mark.slow
def test_c08_end_to_end_desk_run(pytestconfig, desk, tmp_path_factory):
    ws, elapsed = desk
    with criterion(pytestconfig, 8, "desk run: reconstruction drop, FID vs noise, bit-reproducible"):
        hist = json.loads(ws.tokenizer_ckpt.with_suffix(".json").read_text())["loss_series"]
        ratio = hist[-1]["pixel"] / hist[0]["pixel"]
        res = json.loads(ws.path("reports", "evaluation.json").read_text())
        fid, noise = res["fid_overall"], res["fid_noise"]
        print(f"desk run: {elapsed:.0f}s, pixel loss ratio {ratio:.3f}, FID {fid:.4f}, noise FID {noise:.4f}")
        assert elapsed < 4 * 3600
        assert ratio < 0.2, f"(a) final/epoch-1 reconstruction loss {ratio:.3f}"
        assert noise >= 5 * fid, f"(b) noise FID {noise:.4f} < 5 x FID {fid:.4f}"

        again = tmp_path_factory.mktemp("desk_again")
        _desk_run(again)
        ws2 = Workspace(ws.cfg, again)
        files = ["checkpoints/tokenizer.pt", "checkpoints/var.pt", "checkpoints/normalizer.csv",
                 "checkpoints/codebook.csv", "reports/evaluation.json", "reports/features_synth.csv",
                 "reports/fid_matrix.csv", *sorted(p.relative_to(ws.run_dir).as_posix()
                                                   for p in ws.path("manifests").glob("*"))]
        differ = [f for f in files if sha(ws.run_dir / f) != sha(ws2.run_dir / f)]
        assert not differ, f"(c) not bit-reproducible: {differ}"


@pytest.mark.slow
def test_c10_inter_class_fid_matrix(pytestconfig, desk):
    ws, _ = desk
    with criterion(pytestconfig, 10, "inter-class FID matrix is 3 x 3 with no absent cells"):
        cb = MeasurementCodebook.load(ws.codebook_path)
        assert np.all(cb.counts_ > 0)
        fm = json.loads(ws.path("reports", "evaluation.json").read_text())["fid_matrix"]
        values, absent = np.array(fm["values"], float), np.array(fm["absent"], bool)
        assert values.shape == (3, 3) and not absent.any() and np.all(np.isfinite(values))
        assert len(ws.path("reports", "fid_matrix.csv").read_text().splitlines()) == 1 + 3 + 2


# ------------------------------------------------------------------------ 9


@pytest.mark.slow
def test_c09_ablation_harness(pytestconfig, tmp_path):
    with criterion(pytestconfig, 9, "ablation report: 4 settings x 7 classes + average; FM ignores measurements"):
        cfg = yaml.safe_load((ROOT / "configs" / "smoke.yaml").read_text())
        cfg["data"]["toy"] = {"num_classes": 7, "samples_per_class": 10, "seed": 0}
        path = tmp_path / "ablate.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert main(["make-toy", "--config", str(path), "--out", str(tmp_path), "-q"]) == 0
        assert main(["ablate", "--config", str(path), "--out", str(tmp_path), "-q"]) == 0

        base = load_config(path, environ={})
        report = Workspace(base, tmp_path).path("reports", "ablation.csv").read_text().splitlines()
        header = report[0].split(",")
        assert header[2:] == ["AKIEC", "BCC", "BKL", "DF", "MEL", "NV", "VASC", "average"]
        rows = [r.split(",") for r in report[1:]]
        assert [(r[0], r[1]) for r in rows] == [(s, m) for s in ABLATION_FLAGS for m in ("IS", "FID")]
        assert all(len(r) == 2 + 7 + 1 and "failed" not in r for r in rows)

        fm = setting_config(base, "Baseline + LF + FM")
        ws = Workspace(fm, tmp_path)
        var = load_var(ws, load_tokenizer(ws))
        manifest = DatasetManifest.load(ws.dataset_manifest)
        X, M, _ = load_samples(manifest)
        meas = normalize(measure(fm, X[:6], M[:6], manifest.sample_ids[:6]),
                         MeasurementNormalizer.load(ws.normalizer_path))
        assert not np.allclose(meas[0], meas[1])
        fq = var.condition_embedding(meas)
        assert np.array_equal(fq, np.broadcast_to(fq[0], fq.shape)), "F_q depends on the measurements"
        a = var.sample([0, 0], meas[:2], seeds=[4, 4])
        assert all(np.array_equal(p[0], p[1]) for p in a)

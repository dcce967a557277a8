"""Acceptance criteria 1-11. Each test prints one ``PASS``/``FAIL`` line and records it
for the end-of-session summary."""

import statistics
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_RESULTS
from gradutil import max_relative_error
from oracles import LinearSurrogate, codebook_from, naive_labels
from patchbook.cli import dispatch
from patchbook.codebook import PatchCodebook, incubation_labels, predict_beliefs, substitute
from patchbook.core import (PatchGrid, RunConfig, load_config, make_generator, patchify, sample_mask,
                            sample_mask_batch, unpatchify)
from patchbook.data import generate_synthetic, stack_images
from patchbook.evaluate import LandmarkPrediction, auc_fr, f1_per_class, nme
from patchbook.experiments import TABLE7_ARMS, ExperimentSetup, run_ablation, scratch_vs_pretrained
from patchbook.losses import belief_ce_loss, mse_loss, perceptual_loss
from patchbook.model import MaskedReconstructor, PerceptualBackbone
from patchbook.pretrain import MAIN, build_state, train_step, train_step_incubation

GRAD_CFG = RunConfig(image_size=8, patch_size=4, embed_dim=8, encoder_depth=1, decoder_depth=1, encoder_heads=2,
                     decoder_heads=2, mlp_ratio=2, n_tokens=2, perceptual_channels=(4, 4),
                     perceptual_layer_indices=(1, 2))


def record(number, title, ok, detail, elapsed, budget):
    within = elapsed < budget
    line = f"criterion {number:2d} {'PASS' if ok and within else 'FAIL'}  {title}: {detail} ({elapsed:.1f}s / {budget:.0f}s)"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    assert ok, line
    assert within, line


def test_01_mask_cardinality():
    start = time.perf_counter()
    g = make_generator(0)
    sizes = [len(sample_mask(196, 0.75, g)) for _ in range(10_000)]
    failures = sum(s != 147 for s in sizes)
    record(1, "mask cardinality", failures == 0, f"{failures} of 10000 draws differ from 147",
           time.perf_counter() - start, 5)


def test_02_substitution_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = 0
    for trial in range(1000):
        k, n = int(rng.integers(1, 197)), int(rng.integers(1, 6))
        b, d = int(rng.integers(1, 4)), int(rng.integers(1, 17))
        g = make_generator(trial)
        cb = PatchCodebook(k, n, d)
        with torch.no_grad():
            cb.tokens.normal_(generator=g)
        emb = torch.randn(b, k, d, generator=g)
        mask = sample_mask_batch(b, k, float(rng.random()), g)
        alpha = torch.randint(0, n, (b, k), generator=g)
        out = substitute(emb, cb, alpha, mask).detach()
        tokens = cb.tokens.detach()
        for i in range(b):
            for j in range(k):
                expected = tokens[j, alpha[i, j]] if mask[i, j] else emb[i, j]
                bad += not torch.equal(out[i, j], expected)
    record(2, "substitution exactness", bad == 0, f"{bad} mismatching rows over 1000 cases",
           time.perf_counter() - start, 30)


def test_03_gradient_fidelity():
    start = time.perf_counter()
    cfg = GRAD_CFG
    torch.manual_seed(0)
    errors = {}
    a = torch.rand(2, 8, 8, 3, dtype=torch.float64, requires_grad=True)
    b = torch.rand(2, 8, 8, 3, dtype=torch.float64)
    errors["mse"] = max_relative_error(lambda: mse_loss(a, b), [a])
    net = PerceptualBackbone.from_config(cfg).double()
    errors["perceptual"] = max_relative_error(lambda: perceptual_loss(net, a, b), [a])
    logits = torch.randn(6, 3, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 1, 2, 2, 1, 0])
    errors["ce"] = max_relative_error(lambda: belief_ce_loss(logits, labels), [logits])

    model = MaskedReconstructor(cfg).double()
    cb = PatchCodebook(cfg.num_patches, cfg.n_tokens, cfg.embed_dim).double()
    with torch.no_grad():
        cb.tokens.normal_()
    patches = torch.rand(2, cfg.num_patches, cfg.patch_dim, dtype=torch.float64)
    mask = sample_mask_batch(2, cfg.num_patches, 0.5, make_generator(0))
    alpha = torch.randint(0, cfg.n_tokens, (2, cfg.num_patches), generator=make_generator(1))

    def pipeline():
        pred = model.reconstruct(substitute(model.embed(patches), cb, alpha, mask))
        return mse_loss(pred, patches)

    errors["pipeline"] = max_relative_error(pipeline, [cb.tokens, *model.parameters()])
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    record(3, "gradient fidelity", worst < 1e-4, f"max rel error {detail}", time.perf_counter() - start, 120)


def test_04_incubation_label_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches = 0
    for trial in range(100):
        grid, n = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        g = make_generator(trial)
        if trial % 2:
            cfg = RunConfig(image_size=4 * grid, patch_size=4, channels=1, embed_dim=8, encoder_depth=1,
                            encoder_heads=2, decoder_heads=2, n_tokens=n)
            torch.manual_seed(trial)
            model = MaskedReconstructor(cfg).double().eval()
            k, pd = cfg.num_patches, cfg.patch_dim
        else:
            k, pd = grid * grid, 5
            model = LinearSurrogate(pd, 3, trial)
        dim = 8 if trial % 2 else 3
        tokens = torch.randn(k, n, dim, generator=g, dtype=torch.float64)
        if n > 2 and trial % 3 == 0:
            tokens[:, 2] = tokens[:, 0]  # exact ties must resolve to the lower index
        patches = torch.rand(2, k, pd, generator=g, dtype=torch.float64)
        mask = sample_mask_batch(2, k, 0.75, g)
        ours = incubation_labels(patches, mask, codebook_from(tokens), model)
        for i in range(2):
            ref = naive_labels(patches[i], mask[i], tokens, model)
            mismatches += ours[i].tolist() != ref.tolist()
    record(4, "incubation label oracle", mismatches == 0, f"{mismatches} of 200 label maps differ",
           time.perf_counter() - start, 60)


def test_05_token_gradient_sparsity():
    start = time.perf_counter()
    cfg = load_config(preset="tiny").replace(batch_size=4)
    images = stack_images(generate_synthetic(4, 0, image_size=32))
    results = []
    for phase in ("incubation", MAIN):
        state = build_state(cfg)
        state.set_phase(phase)
        train_step(state, images)
        grad = state.codebook.tokens.grad.norm(dim=-1)
        used = torch.zeros_like(grad, dtype=torch.bool)
        bi, ki = state.last_mask.nonzero(as_tuple=True)
        used[ki, state.last_alpha[bi, ki]] = True
        results.append((int((grad[~used] != 0).sum()), int((grad[used] > 0).sum())))
    ok = all(leak == 0 and live > 0 for leak, live in results)
    detail = "; ".join(f"{p}: {leak} unselected nonzero, {live} selected nonzero"
                       for p, (leak, live) in zip(("incubation", "main"), results))
    record(5, "token-gradient sparsity", ok, detail, time.perf_counter() - start, 30)


def test_06_overfit_smoke():
    start = time.perf_counter()
    cfg = load_config(preset="tiny").replace(loss_weight_perceptual=0.0, lr=1e-3, min_lr=1e-3, batch_size=8,
                                             epochs=1)
    state = build_state(cfg)
    state.set_phase(MAIN)
    state.steps_per_epoch = 1
    images = stack_images(generate_synthetic(8, 0, image_size=32))
    patches = patchify(images, cfg.patch_size).patches
    fixed_mask = sample_mask_batch(8, cfg.num_patches, cfg.mask_ratio, make_generator(123))

    @torch.no_grad()
    def full_mse():
        # deterministic evaluation: one fixed mask, belief selection
        alpha = predict_beliefs(state.predictor, patches, fixed_mask).alpha
        pred = state.model.reconstruct(substitute(state.model.embed(patches), state.codebook, alpha, fixed_mask))
        return float(mse_loss(unpatchify(PatchGrid(pred, cfg.grid_size, cfg.grid_size, cfg.patch_size)), images))

    initial = full_mse()
    for _ in range(300):
        train_step(state, images)
    final = full_mse()
    record(6, "overfit smoke", final < 0.1 * initial, f"MSE {initial:.4f} -> {final:.4f} (ratio {final / initial:.3f})",
           time.perf_counter() - start, 300)


def test_07_belief_predictor_learnability():
    start = time.perf_counter()
    accs, stationarity = [], []
    for seed in range(3):
        cfg = load_config(preset="tiny").replace(seed=seed, incubation_ce_only=True, lr=1e-2, min_lr=1e-2,
                                                 batch_size=8, loss_weight_perceptual=0.0, epochs=1,
                                                 decoder_depth=0, weight_decay=0.0)
        state = build_state(cfg)
        with torch.no_grad():
            # zeroed blocks make the encoder position-wise, so each patch's label depends
            # only on its own pixels and position
            for p in state.model.encoder.blocks.parameters():
                p.zero_()
        state.steps_per_epoch = 1
        g = make_generator(100 + seed)
        protos = torch.rand(4, cfg.patch_dim, generator=g)
        kinds = torch.randint(0, 4, (64, cfg.num_patches), generator=g)
        patches = protos[kinds] + 0.02 * torch.randn(64, cfg.num_patches, cfg.patch_dim, generator=g)
        images = unpatchify(PatchGrid(patches, cfg.grid_size, cfg.grid_size, cfg.patch_size))
        for step in range(200):
            idx = torch.randperm(64, generator=make_generator(step))[:8]
            train_step_incubation(state, images[idx])
        m1 = sample_mask_batch(64, cfg.num_patches, cfg.mask_ratio, make_generator(999))
        m2 = sample_mask_batch(64, cfg.num_patches, cfg.mask_ratio, make_generator(998))
        y1 = incubation_labels(patches, m1, state.codebook, state.model)
        y2 = incubation_labels(patches, m2, state.codebook, state.model)
        both = m1 & m2
        stationarity.append(float((y1[both] == y2[both]).float().mean()))
        alpha = predict_beliefs(state.predictor, patches, m1).alpha
        accs.append(float((alpha[m1] == y1[m1]).float().mean()))
    median = statistics.median(accs)
    ok = median > 0.9 and min(stationarity) == 1.0
    record(7, "belief predictor learnability", ok,
           f"accuracy {[round(a, 3) for a in accs]} median {median:.3f}, label stationarity {min(stationarity):.3f}",
           time.perf_counter() - start, 300)


def test_08_metric_exactness():
    start = time.perf_counter()
    errs = []
    f1 = f1_per_class(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2, exclude_background=False)
    errs += [abs(f1["per_class"][0] - 2 / 3), abs(f1["per_class"][1] - 4 / 5)]
    gt = np.array([[[10.0, 10.0], [70.0, 10.0]]])
    pred = gt.copy()
    pred[0, 0, 0] += 3.0
    errs.append(abs(nme(LandmarkPrediction(pred[:, :1], gt[:, :1], inter_ocular=60.0)) - 5.0))
    box = np.array([[[0, 0], [30, 0], [30, 40], [0, 40]]], dtype=float)
    errs.append(abs(nme(LandmarkPrediction(box + [1.0, 0.0], box), "diag") - 2.0))
    errs.append(abs(nme(LandmarkPrediction(box + [0.0, 2.0], box), "box") - 100 * 2 / np.sqrt(1200.0)))
    auc, fr = auc_fr([0.035, 0.07], 0.07)
    errs += [abs(auc - 0.25), abs(fr - 0.0)]
    auc, fr = auc_fr([0.0, 0.1], 0.07)
    errs += [abs(auc - 0.5), abs(fr - 0.5)]
    worst = max(errs)
    record(8, "metric exactness", worst < 1e-9, f"max deviation {worst:.1e} over {len(errs)} hand values",
           time.perf_counter() - start, 5)


@pytest.fixture(scope="module")
def setup():
    return ExperimentSetup()


def test_09_scratch_vs_pretrained(setup, tmp_path):
    torch.set_num_threads(1)
    start = time.perf_counter()
    summary = scratch_vs_pretrained(setup, (0, 1, 2), tmp_path)
    gains = [r["nme_rel_gain"] for r in summary["rows"]]
    median = summary["median_nme_rel_gain"]
    detail = ", ".join(f"seed {r['seed']}: {r['scratch']['nme_diag']:.3f} -> {r['pretrained']['nme_diag']:.3f}"
                       for r in summary["rows"])
    record(9, "scratch vs pretrained", median >= 0.10,
           f"NME_diag {detail}; relative gains {[round(g, 3) for g in gains]} median {median:.3f}",
           time.perf_counter() - start, 1200)


def test_10_ablation_direction(setup, tmp_path):
    torch.set_num_threads(1)
    start = time.perf_counter()
    arms = {"random": "3xK tokens + random selection", "belief": "3xK tokens + belief predictor",
            "no_incubation": "3xK belief, without incubation"}
    assert all(a in TABLE7_ARMS for a in arms.values())
    rows = {r["arm"]: r for r in run_ablation(setup, list(arms.values()), (0, 1, 2), tmp_path)}
    nme_of = {key: rows[arm]["nme_diag"] for key, arm in arms.items()}
    per_seed = {key: [round(m["nme_diag"], 3) for m in rows[arm]["per_seed"]] for key, arm in arms.items()}
    belief_ok = nme_of["belief"] <= nme_of["random"]
    incubation_ok = nme_of["belief"] < nme_of["no_incubation"]
    detail = (f"median NME_diag belief {nme_of['belief']:.3f} vs random {nme_of['random']:.3f} "
              f"({'ok' if belief_ok else 'violated'}), incubation {nme_of['belief']:.3f} vs without "
              f"{nme_of['no_incubation']:.3f} ({'ok' if incubation_ok else 'violated'}); per seed {per_seed}")
    record(10, "ablation direction", belief_ok and incubation_ok, detail, time.perf_counter() - start, 2400)


def test_11_determinism(tmp_path):
    start = time.perf_counter()
    assert dispatch(["data-synth", "--count", "200", "--seed", "7", "--test-fraction", "0",
                     "--out", str(tmp_path / "data")]) == 0
    args = ["pretrain", "--data", str(tmp_path / "data"), "--seed", "3", "--set", "epochs=8",
            "--set", "batch_size=4", "--set", "lr=1e-3"]
    for name in ("a", "b"):
        assert dispatch(args + ["--out", str(tmp_path / name)]) == 0
    same = (tmp_path / "a" / "checkpoint.pt").read_bytes() == (tmp_path / "b" / "checkpoint.pt").read_bytes()
    size = (tmp_path / "a" / "checkpoint.pt").stat().st_size
    record(11, "determinism", same, f"final checkpoints ({size} bytes) {'identical' if same else 'differ'}",
           time.perf_counter() - start, 600)

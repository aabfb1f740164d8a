"""Acceptance suite: one group of checks per numbered criterion. The terminal
summary prints a PASS/FAIL line for each criterion."""
import itertools
import math
import time

import numpy as np
import pytest
import torch
from scipy import integrate

from glintiqa.datasets import IQADataset
from glintiqa.distortions import (
    DistortionSpec,
    apply_distortion,
    available_families,
    family_info,
    laplacian_variance,
    mse,
)
from glintiqa.evaluation.analysis import analyze_distance_quality
from glintiqa.evaluation.gmad import gmad_pairs
from glintiqa.evaluation.metrics import plcc, srocc
from glintiqa.evaluation.protocol import (
    fusion_order_ablation,
    make_split,
    make_splits,
    run_protocol,
    trained_factory,
    write_ablation,
)
from glintiqa.evaluation.significance import f_test
from glintiqa.fusion import CWSA, SIEM, PredictionHead
from glintiqa.model import GlintIQA, ModelConfig, build_model, surrogate_config
from glintiqa.saqt import (
    DatasetManifest,
    EmbeddingExtractor,
    LabeledCorpus,
    SAQTConfig,
    build_dataset,
    semantic_distance,
)
from glintiqa.images import save_png
from glintiqa.synthetic import blur_ladder, make_images
from glintiqa.training import TrainConfig, fit_model, predict

from oracles import brute_plcc, brute_srocc, f_cdf_quadrature, gmad_bruteforce


# --------------------------------------------------------------------------- 1


@pytest.mark.criterion(1)
def test_shape_pipeline_full_size():
    t0 = time.perf_counter()
    for size in (224, 256, 448):
        torch.manual_seed(0)
        cfg = ModelConfig()
        cfg.backbone.img_size = size
        model = GlintIQA(cfg).eval()
        n = (size // 16) * (size // 16)
        with torch.no_grad():
            feats = model.forward_features(torch.rand(1, 3, size, size))
            out = model(torch.rand(1, 3, size, size))
        grids = feats["global"] + feats["local"] + feats["states"]
        assert len(feats["global"]) == 4 and len(feats["local"]) == 3
        for g in grids:
            assert tuple(g.shape) == (1, n, 384)
        assert out.shape == (1,) and torch.isfinite(out).all()
    assert time.perf_counter() - t0 < 60


# --------------------------------------------------------------------------- 2


@pytest.mark.criterion(2)
def test_gradient_check_surrogate():
    t0 = time.perf_counter()
    model = build_model(surrogate_config(), seed=0).double().eval()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    checked = [m for m in model.modules() if isinstance(m, (CWSA, SIEM, PredictionHead))]
    params = [p for m in checked for p in m.parameters()]
    assert len(params) >= 10

    model.zero_grad()
    model(x).sum().backward()
    analytic = [p.grad.detach().clone() for p in params]

    eps = 1e-6
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = model(x).sum().item()
                flat[i] = orig - eps
                down = model(x).sum().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                a = gflat[i].item()
                rel = abs(a - num) / max(abs(a), abs(num), 1e-6)
                worst = max(worst, rel)
    assert worst < 1e-3, worst
    assert time.perf_counter() - t0 < 60


# --------------------------------------------------------------------------- 3


@pytest.mark.criterion(3)
def test_cwsa_zero_value_projection_is_identity():
    torch.manual_seed(0)
    for n, c in [(16, 16), (196, 768), (49, 10)]:
        attn = CWSA(n, c // 2)
        with torch.no_grad():
            attn.v.weight.zero_()
            attn.v.bias.zero_()
        z = torch.randn(3, n, c)
        assert torch.equal(attn(z), z)
        assert (attn(z) - z).abs().max().item() == 0.0


# --------------------------------------------------------------------------- 4


@pytest.mark.criterion(4)
def test_correlations_match_bruteforce_oracles():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(1000):
        n = int(rng.integers(3, 51))
        if trial % 3 == 0:  # integer-valued, with ties
            x, y = rng.integers(0, 6, n).astype(float), rng.integers(0, 6, n).astype(float)
        else:
            x, y = rng.standard_normal(n), rng.standard_normal(n)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        worst = max(worst, abs(srocc(x, y) - brute_srocc(x, y)), abs(plcc(x, y) - brute_plcc(x, y)))
    assert worst <= 1e-12, worst


@pytest.mark.criterion(4)
def test_srocc_monotone_invariance_exact():
    rng = np.random.default_rng(5)
    transforms = [np.exp, np.arctan, lambda v: 3.0 * v + 7.0, lambda v: v**3, lambda v: np.tanh(v / 4)]
    for _ in range(200):
        n = int(rng.integers(3, 51))
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        ref = srocc(x, y)
        for f in transforms:
            assert srocc(f(x), y) == ref
            assert srocc(x, f(y)) == ref


# --------------------------------------------------------------------------- 5


@pytest.fixture(scope="module")
def saqt_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("saqt")
    pristine = make_images(10, 48, seed=11)
    hq = make_images(20, 48, seed=12)
    # four high-quality images are exact copies of pristine ones
    dup = {3: 0, 7: 4, 12: 9, 18: 5}
    for j, i in dup.items():
        hq[j] = pristine[i].copy()
    (root / "pristine").mkdir()
    (root / "hq").mkdir()
    for i, img in enumerate(pristine):
        save_png(img, root / "pristine" / f"p{i:02d}.png")
    for j, img in enumerate(hq):
        save_png(img, root / "hq" / f"h{j:02d}.png")
    families = ["gaussian_blur", "jpeg", "white_noise"]
    rng = np.random.default_rng(0)
    rows = [(f"p{i:02d}", f, lv, float(rng.uniform(1, 5))) for i in range(10) for f in families
            for lv in range(1, 6)]
    corpus = LabeledCorpus.from_scores(rows, (1.0, 5.0),
                                       {f"p{i:02d}": str(root / "pristine" / f"p{i:02d}.png") for i in range(10)})
    extractor = EmbeddingExtractor("resnet101", "random", seed=0)
    t0 = time.perf_counter()
    cfg = SAQTConfig(families, [1, 2, 3, 4, 5], seed=0)
    manifest, summary = build_dataset(root / "hq", corpus, cfg, root / "out" / "manifest.jsonl", extractor)
    elapsed = time.perf_counter() - t0
    return dict(root=root, corpus=corpus, extractor=extractor, manifest=manifest, summary=summary,
                dup=dup, families=families, elapsed=elapsed)


@pytest.mark.criterion(5)
def test_saqt_labels_bitwise(saqt_fixture):
    corpus, man = saqt_fixture["corpus"], saqt_fixture["manifest"]
    idx = {e.id: k for k, e in enumerate(corpus.entries)}
    assert len(man.records) == 20 * 3 * 5
    for r in man.records:
        expected = corpus.mos_of(idx[r["matched_pristine_id"]], r["type"], r["level"])
        assert np.float64(r["label"]).tobytes() == np.float64(expected).tobytes()
    # the manifest on disk round-trips the same floats
    again = DatasetManifest.read(saqt_fixture["root"] / "out" / "manifest.jsonl")
    assert [r["label"] for r in again.records] == [r["label"] for r in man.records]


@pytest.mark.criterion(5)
def test_saqt_distances_and_argmin_oracle(saqt_fixture):
    from glintiqa.images import load_image

    root, ext = saqt_fixture["root"], saqt_fixture["extractor"]
    pvecs = [ext(load_image(root / "pristine" / f"p{i:02d}.png")).vector for i in range(10)]
    matched = {r["source_high_quality_id"]: (r["matched_pristine_id"], r["semantic_distance"])
               for r in saqt_fixture["manifest"].records}
    assert len(matched) == 20
    for j in range(20):
        q = ext(load_image(root / "hq" / f"h{j:02d}.png")).vector
        best, best_d = None, math.inf
        for i, p in enumerate(pvecs):  # linear scan, first minimum wins
            d = semantic_distance(q, p)
            if d < best_d:
                best, best_d = i, d
        got_id, got_d = matched[f"h{j:02d}"]
        assert got_id == f"p{best:02d}"
        assert got_d == best_d
        assert 0.0 <= got_d <= 2.0
        if j in saqt_fixture["dup"]:
            assert got_id == f"p{saqt_fixture['dup'][j]:02d}"
            assert got_d == 0.0
    assert saqt_fixture["elapsed"] < 120


# --------------------------------------------------------------------------- 6


@pytest.mark.criterion(6)
def test_distortion_monotonicity(fixture_images):
    violations = []
    for fam in available_families():
        proxy = family_info(fam)["proxy"]
        for k, img in enumerate(fixture_images):
            vals = []
            for lv in range(1, 6):
                out = apply_distortion(img, DistortionSpec.make(fam, lv, seed=k), f"img{k}").data
                vals.append(laplacian_variance(out) if proxy == "laplacian" else mse(out, img))
            ok = all(b <= a for a, b in zip(vals, vals[1:])) if proxy == "laplacian" else \
                all(b >= a for a, b in zip(vals, vals[1:]))
            if not ok:
                violations.append((fam, k, vals))
    assert len(available_families()) >= 10
    assert violations == []


# --------------------------------------------------------------------------- 7 / 12 shared corpus


OVERFIT_TRAIN = TrainConfig(epochs=50, batch_size=16, lr=1e-3, weight_decay=1e-5, crop_size=32,
                            eval_interval=10, eval_patches=5, seed=0)


@pytest.fixture(scope="module")
def ladder():
    return blur_ladder(20, 40, seed=1)


@pytest.mark.criterion(7)
@pytest.mark.slow
def test_overfit_sanity(ladder):
    t0 = time.perf_counter()
    plan = make_split(ladder, 0, seed=0)
    train, test = ladder.subset(plan.train_ids), ladder.subset(plan.test_ids)
    assert len(plan.test_keys) == 4 and not plan.train_keys & plan.test_keys
    model = fit_model(surrogate_config(), train, OVERFIT_TRAIN)
    tr = srocc(predict(model, train, 5, crop_size=32), [s.label for s in train])
    te = srocc(predict(model, test, 5, crop_size=32), [s.label for s in test])
    print(f"overfit: train srocc {tr:.4f}, test srocc {te:.4f}")
    assert tr > 0.9
    assert te > 0.7
    assert time.perf_counter() - t0 < 15 * 60


# --------------------------------------------------------------------------- 8


@pytest.mark.criterion(8)
def test_protocol_determinism():
    data = blur_ladder(10, 40, seed=4)
    cfg = TrainConfig(epochs=2, batch_size=16, lr=1e-3, crop_size=32, eval_patches=3, seed=0)
    factory = trained_factory(surrogate_config(), cfg)
    first = run_protocol(factory, data, n_repeats=10, seed=3)
    second = run_protocol(factory, data, n_repeats=10, seed=3)
    assert [r for r in first.rows if r["error"]] == []
    for a, b in zip(first.rows, second.rows):
        assert np.float64(a["srocc"]).tobytes() == np.float64(b["srocc"]).tobytes()
        assert np.float64(a["plcc"]).tobytes() == np.float64(b["plcc"]).tobytes()
    assert first.medians == second.medians and first.config_hash == second.config_hash


@pytest.mark.criterion(8)
def test_synthetic_splits_content_disjoint(ladder):
    by_id = {s.id: s.content_id for s in ladder.samples}
    plans = make_splits(ladder, 10, seed=0)
    assert len(plans) == 10
    for plan in plans:
        tr = {by_id[i] for i in plan.train_ids}
        te = {by_id[i] for i in plan.test_ids}
        assert tr & te == set()
        assert len(te) == 4 and len(tr) == 16


# --------------------------------------------------------------------------- 9


def _distance_corpus(seed=7, n=60, span=1.2):
    """Embeddings on an arc; MOS vectors drift along the arc like a random walk,
    so the MOS difference of two pristines grows with their semantic distance.
    One exact duplicate contributes a distance-0 pair."""
    rng = np.random.default_rng(seed)
    phis = np.sort(rng.uniform(0, span, n))
    keys = [(f"t{t}", lv) for t in range(25) for lv in range(1, 6)]
    base = rng.uniform(0, 9, len(keys))
    steps = np.diff(np.concatenate([[0.0], phis]))
    walk = np.cumsum(rng.standard_normal((n, len(keys))) * np.sqrt(steps)[:, None], axis=0)
    emb, mos = {}, {}
    for i in range(n):
        e = np.zeros(2048)
        e[0], e[1] = np.cos(phis[i]), np.sin(phis[i])
        emb[f"p{i:02d}"] = e
        mos[f"p{i:02d}"] = dict(zip(keys, base + 4.0 * walk[i]))
    emb["dup"], mos["dup"] = emb["p10"].copy(), dict(mos["p10"])
    return emb, mos


@pytest.mark.criterion(9)
def test_distance_quality_curve():
    emb, mos = _distance_corpus()
    table = analyze_distance_quality(emb, mos, width=0.07)
    populated = [b for b in table.bins if b.count > 0][:5]
    assert len(populated) == 5
    means = [b.mean_plcc for b in populated]
    assert all(b < a for a, b in zip(means, means[1:])), means
    zero = [p for p in table.pairs if p[2] == 0.0]
    assert zero and all(p[3] == 1.0 for p in zero)


# --------------------------------------------------------------------------- 10


@pytest.mark.criterion(10)
def test_gmad_matches_bruteforce():
    rng = np.random.default_rng(10)
    for trial in range(20):
        ids = [f"img{i:03d}" for i in range(200)]
        if trial % 2:  # coarse scores force ties
            d = dict(zip(ids, rng.integers(0, 30, 200).astype(float)))
            a = dict(zip(ids, rng.integers(0, 30, 200).astype(float)))
        else:
            d = dict(zip(ids, rng.uniform(0, 1, 200)))
            a = dict(zip(ids, rng.uniform(0, 1, 200)))
        got = [(p.level, p.low, p.high) for p in gmad_pairs(d, a, 6)]
        assert got == gmad_bruteforce(d, a, 6)


# --------------------------------------------------------------------------- 11


@pytest.mark.criterion(11)
def test_f_test_calibration():
    rng = np.random.default_rng(11)
    base = rng.standard_normal(100)
    # exact variance ratio 4 and exact ratio 1
    r4 = f_test(2.0 * base, base)
    assert r4.ratio == pytest.approx(4.0, rel=1e-12)
    assert r4.significant and r4.symbol == "0"
    assert f_test(base, 2.0 * base).symbol == "1"
    r1 = f_test(base, -base)
    assert r1.ratio == 1.0 and not r1.significant and r1.symbol == "-"


@pytest.mark.criterion(11)
def test_f_test_antisymmetry():
    rng = np.random.default_rng(12)
    flip = {"superior": "inferior", "inferior": "superior", "indistinguishable": "indistinguishable"}
    for _ in range(300):
        a = rng.standard_normal(int(rng.integers(10, 200))) * rng.uniform(0.5, 2)
        b = rng.standard_normal(int(rng.integers(10, 200))) * rng.uniform(0.5, 2)
        assert f_test(b, a).verdict == flip[f_test(a, b).verdict]


@pytest.mark.criterion(11)
def test_f_quantiles_against_quadrature():
    for dfa, dfb in [(99, 99), (20, 50), (149, 99)]:
        r = f_test(np.arange(dfa + 1.0), np.arange(dfb + 1.0))
        assert abs(f_cdf_quadrature(r.upper, dfa, dfb) - 0.95) < 1e-6
        assert abs(f_cdf_quadrature(r.lower, dfa, dfb) - 0.05) < 1e-6


# --------------------------------------------------------------------------- 12


@pytest.mark.criterion(12)
@pytest.mark.slow
def test_fusion_order_ablation_report(ladder, tmp_path):
    rows = fusion_order_ablation(ladder, surrogate_config(), OVERFIT_TRAIN)
    assert [r["fusion_order"] for r in rows] == ["clfe_to_vgfe", "vgfe_to_clfe"]
    for r in rows:
        assert all(math.isfinite(r[k]) for k in ("train_srocc", "test_srocc", "test_plcc"))
    write_ablation(rows, tmp_path / "ablation")
    lines = (tmp_path / "ablation.csv").read_text().strip().splitlines()
    assert len(lines) == 3
    assert (tmp_path / "ablation.png").stat().st_size > 0

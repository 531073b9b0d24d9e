"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (visible in ``pytest -v``
output) and then asserts. Run just this file with
``pytest tests/test_acceptance.py -v``.
"""

import math
import time

import numpy as np
import pytest
import torch

from illumid.augment import (
    IlluminationConfig,
    SampleRecord,
    build_augmented_manifest,
    gamma_correct,
    poisson_noise,
    synth_toy_dataset,
    write_manifest,
)
from illumid.cli import main as cli_main
from illumid.data import load_manifest
from illumid.evaluation import cmc_map, evaluate, k_reciprocal_rerank
from illumid.losses import dis_illumination_loss, smoothed_ce
from illumid.model import StageEncoderSpec, init_params
from illumid.trainer import (
    pretrain_illum_teacher,
    pretrain_reid_teacher,
    toy_preset,
    train_tsd,
)

from oracles import autograd_grad, brute_cmc_map, central_fd_grad, rel_err, rerank_oracle
from test_evaluation import random_instance, unit
from test_losses import grad_cases

TREND_SEEDS = range(5)
TREND_VARIANTS = ("baseline", "backbone", "dis_ts")


@pytest.fixture
def verdict(capsys):
    def emit(n, name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{n}] {name}: {detail}")
        return ok

    return emit


def test_1_loss_gradients(verdict):
    t0 = time.time()
    worst, failures = 0.0, []
    for seed in range(20):
        for name, f, x in grad_cases(seed):
            err = rel_err(autograd_grad(f, x), central_fd_grad(f, x, 1e-5))
            worst = max(worst, err)
            if not err < 1e-4:
                failures.append((seed, name, err))
    elapsed = time.time() - t0
    ok = not failures and elapsed < 60
    verdict(1, "loss gradient suite", ok,
            f"11 loss cases x 20 seeds, worst rel err {worst:.1e} (< 1e-4), {elapsed:.1f}s (< 60s)")
    assert not failures, failures
    assert elapsed < 60


def test_2_analytic_minima(verdict):
    r = np.random.default_rng(0)
    checks = []
    for n in (2, 3, 8, 20):
        checks.append(abs(dis_illumination_loss(torch.zeros(4, n, dtype=torch.float64)).item() - math.log(n)))
        labels = torch.tensor(r.integers(0, n, size=4))
        checks.append(abs(smoothed_ce(torch.zeros(4, n, dtype=torch.float64), labels, 0.1, n).item() - math.log(n)))
    at_min = max(checks)
    margins = []
    for _ in range(1000):
        n = int(r.integers(2, 21))
        logits = torch.tensor(r.normal(scale=r.uniform(0.1, 5.0), size=(int(r.integers(1, 9)), n)))
        margins.append(dis_illumination_loss(logits).item() - math.log(n))
    ok = at_min <= 1e-9 and min(margins) > 0
    verdict(2, "analytic minima", ok,
            f"|loss - ln N| at uniform logits <= {at_min:.1e}; 1000 probes all above ln N (min excess {min(margins):.2e})")
    assert ok


def test_3_metric_oracles(verdict):
    r = np.random.default_rng(2024)
    cmc_ok = 0
    for _ in range(100):
        inst = random_instance(r)
        rep = cmc_map(*inst)
        cmc, m, skipped = brute_cmc_map(*inst)
        cmc_ok += rep.cmc == cmc and rep.map == m and rep.num_skipped_query == skipped
    r = np.random.default_rng(77)
    worst = 0.0
    for _ in range(20):
        ng, nq, d = int(r.integers(8, 51)), int(r.integers(1, 8)), int(r.integers(2, 9))
        k1 = int(r.integers(2, min(ng, 20) + 1))
        k2 = int(r.integers(1, k1))
        lam = float(r.random())
        centers = r.normal(size=(5, d))
        q = unit(centers[r.integers(0, 5, nq)] + 0.4 * r.normal(size=(nq, d)))
        g = unit(centers[r.integers(0, 5, ng)] + 0.4 * r.normal(size=(ng, d)))
        worst = max(worst, float(np.abs(k_reciprocal_rerank(q, g, k1, k2, lam) - rerank_oracle(q, g, k1, k2, lam)).max()))
    ok = cmc_ok == 100 and worst <= 1e-9
    verdict(3, "metric oracle equivalence", ok,
            f"cmc_map exact on {cmc_ok}/100 instances; rerank max abs diff {worst:.1e} on 20 instances (<= 1e-9)")
    assert ok


def _tiny(**kw):
    base = dict(batch_size=8, K=4, P=2, iters_per_epoch=1, warmup_epochs=1, lr_decay_epochs=(3,), base_lr=1e-3)
    base.update(kw)
    return toy_preset(**base)


def test_4_algorithm_conformance(toy_ds, verdict):
    spec = StageEncoderSpec()
    illum = IlluminationConfig()
    problems = []
    for T, n in ((1, 5), (2, 6), (3, 7)):
        ends = {}

        def on_step(epoch, it, stage, net):
            ends[epoch] = net.fc_illu.weight.detach().clone(), net.fc_illu.bias.detach().clone()

        _, recs = train_tsd(toy_ds, spec, None, _tiny(T=T, epoch_max=n, variant="dis"), illum, on_step=on_step)
        stages = [r["stage"] for r in recs]
        if stages != ["illum" if i % T == 0 else "reid" for i in range(n)]:
            problems.append(f"T={T}: stages {stages}")
        for e in range(1, n):
            if stages[e] == "reid" and not all(torch.equal(a, b) for a, b in zip(ends[e], ends[e - 1])):
                problems.append(f"T={T}: fc_illu moved in reid epoch {e}")

    # parameter partition on every step of a 4-epoch toy run (full 64-image batches)
    cfg = toy_preset(variant="dis_ts", epoch_max=4, warmup_epochs=1, lr_decay_epochs=(3,), iters_per_epoch=2,
                     warm_start=False)
    teachers = {
        "reid": pretrain_reid_teacher(toy_ds, spec, cfg, epochs=1),
        "illum": pretrain_illum_teacher(toy_ds, spec, cfg, illum, epochs=1),
    }
    prev = {k: v.detach().clone() for k, v in init_params(spec, toy_ds.n_person, illum.n_illu, cfg.seed).named_parameters()}
    steps = []

    def check(epoch, it, stage, net):
        cur = {k: v.detach().clone() for k, v in net.named_parameters()}
        frozen = ("le_r.", "fc_id.") if stage == "illum" else ("le_i.", "fc_illu.")
        moving = ("fe_s.", "le_i.", "fc_illu.") if stage == "illum" else ("fe_s.", "le_r.", "fc_id.")
        for k in cur:
            if k.startswith(frozen) and not torch.equal(cur[k], prev[k]):
                problems.append(f"{stage} step {epoch}/{it} changed {k}")
        for prefix in moving:
            if all(torch.equal(cur[k], prev[k]) for k in cur if k.startswith(prefix)):
                problems.append(f"{stage} step {epoch}/{it} left {prefix} untouched")
        steps.append(stage)
        prev.update(cur)

    train_tsd(toy_ds, spec, teachers, cfg, illum, on_step=check)
    ok = not problems and steps == ["illum"] * 2 + ["reid"] * 2 + ["illum"] * 2 + ["reid"] * 2
    verdict(4, "alternation conformance", ok,
            f"stage sequences for (1,5),(2,6),(3,7), frozen FC_Illu, partition on {len(steps)} steps"
            + (f"; problems: {problems[:3]}" if problems else ""))
    assert ok, problems


def test_5_augmentation(verdict, tmp_path):
    r = np.random.default_rng(0)
    img = r.random((16, 16, 3)).astype(np.float32)
    identity = np.array_equal(gamma_correct(img, 1.0), img)
    darker = all(
        np.all(gamma_correct(img, g1) <= gamma_correct(img, g2) + 1e-7)
        for g1, g2 in zip((0.1, 0.2, 0.3, 0.4, 0.5, 0.7), (0.2, 0.3, 0.4, 0.5, 0.7, 1.0))
    )
    darker = darker and gamma_correct(img, 0.5).mean() < img.mean()

    flat = np.full((100, 100, 1), 0.4, dtype=np.float32)  # 10^4 pixels
    noisy = poisson_noise(flat, 255.0, seed=3)
    sigma = math.sqrt(0.4 / 255.0) / math.sqrt(flat.size)
    mean_ok = abs(noisy.mean() - 0.4) < 3 * sigma

    src = [SampleRecord(f"images/{i}.png", i % 3, i % 2, "train", 6, 1.0) for i in range(7)]
    cfg = IlluminationConfig()
    counts_ok = (
        len(build_augmented_manifest(src, cfg, 0, "expand_all")) == 56
        and len(build_augmented_manifest(src, cfg, 0, "assign_random")) == 7
        and len(build_augmented_manifest(src, IlluminationConfig((1.0,)), 0, "expand_all")) == 7
    )
    ok = identity and darker and mean_ok and counts_ok
    verdict(5, "augmentation suite", ok,
            f"gamma=1 identity {identity}; monotone darkening {darker}; "
            f"Poisson mean |{noisy.mean():.5f}-0.4| < 3 sigma={3 * sigma:.5f}: {mean_ok}; expansion counts {counts_ok}")
    assert ok


@pytest.fixture(scope="module")
def trend_results(tmp_path_factory):
    """Train baseline / backbone / dis_ts on five paired seeds of the toy corpus."""
    root = tmp_path_factory.mktemp("trend")
    illum = IlluminationConfig()
    spec = StageEncoderSpec()
    r1 = {v: [] for v in TREND_VARIANTS}
    records = {v: [] for v in TREND_VARIANTS}
    t0 = time.time()
    for seed in TREND_SEEDS:
        d = root / f"toy{seed}"
        recs = synth_toy_dataset(20, 10, 32, 2, seed, d)
        write_manifest(build_augmented_manifest(recs, illum, seed + 1000, "assign_random"), d / "test.jsonl")
        ds = load_manifest(d / "test.jsonl", cfg=illum)
        teachers = None
        for variant in TREND_VARIANTS:
            cfg = toy_preset(variant=variant, seed=seed)
            if cfg.uses_teachers and teachers is None:
                teachers = {
                    "reid": pretrain_reid_teacher(ds, spec, cfg),
                    "illum": pretrain_illum_teacher(ds, spec, cfg, illum),
                }
            net, recs_v = train_tsd(ds, spec, teachers if cfg.uses_teachers else None, cfg, illum)
            r1[variant].append(evaluate(net, ds, illum_cfg=illum, seed=seed).rank(1))
            records[variant].append(recs_v)
    return r1, records, time.time() - t0


def test_6_trend(trend_results, verdict):
    r1, _, elapsed = trend_results
    mean = {v: float(np.mean(r1[v])) for v in TREND_VARIANTS}
    gap = mean["dis_ts"] - mean["baseline"]
    ok = mean["dis_ts"] >= mean["backbone"] >= mean["baseline"] and gap >= 0.03
    per_seed = "; ".join(f"{v} {[round(100 * x, 1) for x in r1[v]]}" for v in TREND_VARIANTS)
    verdict(6, "trend at toy scale", ok,
            f"mean R1 dis_ts {100 * mean['dis_ts']:.1f} / backbone {100 * mean['backbone']:.1f} / "
            f"baseline {100 * mean['baseline']:.1f}, gap {100 * gap:+.1f} (need >= +3.0); "
            f"{elapsed / 60:.1f} min on {torch.get_num_threads()} thread(s); per seed: {per_seed}")
    assert ok


def test_6b_loss_decrease(trend_results, verdict):
    # trailing 10-epoch mean of each stage's loss ends below its first-10-epoch mean
    _, records, _ = trend_results
    bad = []
    for variant, runs in records.items():
        for seed, recs in zip(TREND_SEEDS, runs):
            for stage in ("illum", "reid"):
                vals = [r["losses"]["total"] for r in recs if r["stage"] == stage]
                if vals and not np.mean(vals[-10:]) < np.mean(vals[:10]):
                    bad.append((variant, seed, stage))
    verdict("6b", "loss decrease sanity", not bad, f"{len(bad)} (variant, seed, stage) runs failed to decrease")
    assert not bad


def test_7_determinism(cli_baseline_run, toy_dir, tmp_path, monkeypatch, verdict):
    monkeypatch.delenv("ILLUMID_NUM_WORKERS", raising=False)
    again = tmp_path / "again"
    code = cli_main(["--log-level", "WARNING", "train", "--manifest", str(toy_dir / "manifest.jsonl"),
                     "--variant", "baseline", "--preset", "toy", "--seed", "0", "--out", str(again)])
    ckpt_same = (cli_baseline_run / "checkpoint.pt").read_bytes() == (again / "checkpoint.pt").read_bytes()
    report_same = (cli_baseline_run / "report.jsonl").read_bytes() == (again / "report.jsonl").read_bytes()
    evals = []
    for name in ("a", "b"):
        assert cli_main(["--log-level", "WARNING", "eval", "--checkpoint", str(again / "checkpoint.pt"),
                         "--manifest", str(toy_dir / "test.jsonl"), "--rerank", "--seed", "0",
                         "--out", str(tmp_path / f"{name}.json")]) == 0
        evals.append((tmp_path / f"{name}.json").read_bytes())
    ok = code == 0 and ckpt_same and report_same and evals[0] == evals[1]
    verdict(7, "determinism", ok,
            f"checkpoints bit-identical {ckpt_same}, reports identical {report_same}, "
            f"eval JSON byte-identical {evals[0] == evals[1]}")
    assert ok


def test_8_teacher_sanity(toy_ds, verdict):
    spec = StageEncoderSpec()
    cfg = toy_preset()
    reid = pretrain_reid_teacher(toy_ds, spec, cfg, epochs=40)
    illum = pretrain_illum_teacher(toy_ds, spec, cfg, IlluminationConfig(poisson_enabled=False), epochs=40)
    ok = reid.train_accuracy > 0.90 and illum.train_accuracy > 0.95
    verdict(8, "teacher sanity", ok,
            f"reid teacher train accuracy {100 * reid.train_accuracy:.1f}% (> 90%), "
            f"illumination teacher {100 * illum.train_accuracy:.1f}% on noise-free diffs (> 95%)")
    assert ok

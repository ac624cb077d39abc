import math

import numpy as np
import pytest

from patchadapt.config import RunConfig
from patchadapt.curriculum import (MODES, OptimizerState, Stage, build_plan, poly_lr,
                                   run_curriculum, run_stage, sgd_step)
from patchadapt.dataio import make_benchmark
from patchadapt.diffcore import NonFiniteError, Tensor
from patchadapt.nets import ModelBundle, load_checkpoint

TINY = dict(n_source=12, n_target=12, n_test=6, iters=3, pretrain_iters=4)


@pytest.fixture(scope="module")
def bench():
    return make_benchmark(0, n_source=12, n_target=12, n_test=6)


def kinds(plan):
    return [(st.name, st.target, st.classifier, "pseudo" in st.labeled) for st in plan.stages]


def test_canonical_plan():
    assert kinds(build_plan("canonical")) == [
        ("pretrain", None, None, False),
        ("stage1a", "easy", "df", False),
        ("stage1b", "easy", "de", False),
        ("pseudo_label", "easy", None, False),
        ("stage2a", "hard", "df", True),
        ("stage2b", "hard", "de", True),
    ]


def test_reverse_plans():
    both = kinds(build_plan("reverse_both"))
    assert [k[1:3] for k in both[1:3]] == [("hard", "de"), ("hard", "df")]
    assert both[3][:2] == ("pseudo_label", "hard")
    assert [k[1:3] for k in both[4:]] == [("easy", "de"), ("easy", "df")]
    feats = kinds(build_plan("reverse_features"))
    assert [k[2] for k in feats] == [None, "de", "df", None, "de", "df"]
    patches = kinds(build_plan("reverse_patches"))
    assert [k[1] for k in patches] == [None, "hard", "hard", "hard", "easy", "easy"]
    assert kinds(build_plan("no_curriculum")) == [
        ("pretrain", None, None, False), ("stage1a", "all", "df", False), ("stage1b", "all", "de", False)]
    with pytest.raises(ValueError):
        build_plan("sideways")


def test_pseudo_before_consumption_is_enforced():
    from patchadapt.curriculum import CurriculumPlan
    with pytest.raises(ValueError):
        CurriculumPlan("bad", (Stage("pretrain"), Stage("s", labeled=("source", "pseudo"), target="hard",
                                                          classifier="df")))


def test_poly_lr():
    assert poly_lr(0.0025, 0, 100) == 0.0025
    assert poly_lr(0.0025, 100, 100) == 0.0
    assert poly_lr(0.0025, 50, 100) == pytest.approx(0.0025 * 0.5 ** 0.9, rel=1e-15)
    assert poly_lr(0.0025, 50, 100) == pytest.approx(0.0013397, abs=1e-7)
    with pytest.raises(ValueError):
        poly_lr(0.1, 101, 100)
    vals = [poly_lr(1.0, i, 37, 0.9) for i in range(38)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_sgd_examples():
    w = Tensor([1.0], requires_grad=True)
    w.grad = np.array([0.1])
    sgd_step([w], None, OptimizerState([w], 0.1, momentum=0.0, weight_decay=0.0))
    assert w.data[0] == pytest.approx(0.99, abs=1e-15) and w.grad is None

    w = Tensor([0.0], requires_grad=True)
    st = OptimizerState([w], 1.0, momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        sgd_step([w], [np.array([1.0])], st)
    assert w.data[0] == pytest.approx(-2.9, abs=1e-15)

    w = Tensor([3.0, -2.0], requires_grad=True)
    sgd_step([w], [np.zeros(2)], OptimizerState([w], 0.5, weight_decay=0.0))
    np.testing.assert_array_equal(w.data, [3.0, -2.0])


def test_sgd_weight_decay_and_schedule():
    w = Tensor([2.0], requires_grad=True)
    st = OptimizerState([w], 0.1, momentum=0.0, weight_decay=0.5, max_iter=2)
    lr = sgd_step([w], [np.array([1.0])], st)
    assert lr == 0.1 and w.data[0] == pytest.approx(2.0 - 0.1 * (1.0 + 1.0))
    assert sgd_step([w], [np.array([0.0])], st) == pytest.approx(0.1 * 0.5 ** 0.9)


def test_sgd_rejects_nan_gradient():
    w = Tensor([1.0], requires_grad=True)
    with pytest.raises(NonFiniteError, match="parameter 0"):
        sgd_step([w], [np.array([np.nan])], OptimizerState([w], 0.1))


def test_run_stage_errors_on_missing_pool(bench):
    b = ModelBundle.create(seed=0)
    with pytest.raises(ValueError, match="easy"):
        run_stage(Stage("stage1a", target="easy", classifier="df"), b,
                  {"source": bench.source}, RunConfig(**TINY), np.random.default_rng(0))


def test_pretrain_is_source_only_and_counts(bench):
    b = ModelBundle.create(seed=0)
    log = []
    b, res = run_stage(Stage("pretrain"), b, {"source": bench.source, "all": bench.target},
                       RunConfig(**TINY), np.random.default_rng(0), log)
    assert res.domains_seen == {"source"}
    assert all(math.isnan(v) for v in res.adv) and res.disc_acc == []
    assert b.stage_index == 1 and b.stage == "pretrain" and b.iteration == 4
    assert len(log) == 4 and log[0].startswith("pretrain\t0\t")


def test_adversarial_stage_tracks_discriminator(bench):
    b = ModelBundle.create(seed=0)
    pools = {"source": bench.source, "easy": bench.target[:6]}
    cfg = RunConfig(**TINY)
    for clf in ("df", "de"):
        b, res = run_stage(Stage("s", target="easy", classifier=clf), b, pools, cfg,
                           np.random.default_rng(1))
        assert res.domains_seen == {"source", "target"}
        assert len(res.disc_acc) == 3 and all(np.isfinite(res.adv))
        # zero-initialised final layer: first step sees D = 0.5 on both sides
        if clf == "df":
            assert res.adv[0] == pytest.approx(2 * math.log(2), abs=1e-6)


def test_alternating_objective_runs(bench):
    b = ModelBundle.create(seed=0)
    cfg = RunConfig(objective="alternating", **TINY)
    _, res = run_stage(Stage("s", target="all", classifier="de"), b,
                       {"source": bench.source, "all": bench.target}, cfg, np.random.default_rng(0))
    assert len(res.adv) == 3


def test_run_curriculum_writes_artifacts_and_is_deterministic(bench, tmp_path):
    cfg = RunConfig(**TINY)
    rep1 = run_curriculum(build_plan("canonical"), bench, cfg, seed=3, out_dir=tmp_path / "a")
    rep2 = run_curriculum(build_plan("canonical"), bench, cfg, seed=3, out_dir=tmp_path / "b")
    assert rep1 == rep2
    for name in ("report.json", "train.log", "split.tsv", "checkpoints/05_stage2b.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ckpts = sorted(p.name for p in (tmp_path / "a" / "checkpoints").iterdir())
    # numbered by training stage; the pseudo-label step does not train
    assert ckpts == ["01_pretrain.ckpt", "02_stage1a.ckpt", "03_stage1b.ckpt",
                     "04_stage2a.ckpt", "05_stage2b.ckpt"]
    assert load_checkpoint(tmp_path / "a" / "checkpoints" / ckpts[-1]).history == [
        "pretrain", "stage1a", "stage1b", "stage2a", "stage2b"]

    # stage order in the log matches the plan; pseudo-labels appear before use
    order = []
    for line in (tmp_path / "a" / "train.log").read_text().splitlines():
        name = line.split("\t")[0]
        if not order or order[-1] != name:
            order.append(name)
    assert order == ["pretrain", "stage1a", "stage1b", "pseudo_label", "stage2a", "stage2b"]

    assert rep1["final"]["stage"] == "stage2b"
    assert rep1["split"]["n_easy"] == 5 and rep1["split"]["n_hard"] == 6
    stages = {s["name"]: s for s in rep1["stages"]}
    assert "source_test" in stages["pretrain"]
    for s in rep1["stages"]:
        if s["kind"] == "train":
            ious = [v for v in s["test"]["iou"] if v is not None]
            assert abs(s["test"]["miou"] - sum(ious) / len(ious)) < 1e-12


@pytest.mark.parametrize("mode", MODES)
def test_every_mode_runs(bench, mode):
    rep = run_curriculum(build_plan(mode), bench, RunConfig(**TINY), seed=0)
    assert [s["name"] for s in rep["stages"]] == build_plan(mode).names()


def test_pretrained_bundle_skips_pretrain(bench):
    cfg = RunConfig(**TINY)
    b = ModelBundle.create(seed=0)
    run_stage(Stage("pretrain"), b, {"source": bench.source}, cfg, np.random.default_rng(0))
    snapshot = b.fingerprint()
    rep = run_curriculum(build_plan("no_curriculum"), bench, cfg, seed=0, bundle=b)
    assert rep["stages"][0].get("skipped") and b.fingerprint() != snapshot
    assert b.history == ["pretrain", "stage1a", "stage1b"]


def test_rescore_resplits_each_stage(bench):
    cfg = RunConfig(rescore=True, **TINY)
    rep = run_curriculum(build_plan("canonical"), bench, cfg, seed=0)
    assert rep["split"]["n_easy"] + rep["split"]["n_hard"] == len(bench.target)

"""Curriculum plans, the SGD optimiser, and stage / full-run orchestration."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .dataio import Benchmark, PatchSample
from .diffcore import NonFiniteError, Tensor
from .losses import adv_loss, assemble_objective, seg_loss
from .metrics import confusion, summarize
from .nets import ModelBundle, forward_de, forward_df, forward_seg, save_checkpoint
from .uncertainty import (IGNORE_INDEX, entropy_map, generate_pseudo_labels, rank_scores,
                          score_patches, write_split_manifest)

logger = logging.getLogger(__name__)

MODES = ("canonical", "reverse_features", "reverse_patches", "reverse_both", "no_curriculum")


@dataclass(frozen=True)
class Stage:
    name: str
    kind: str = "train"                 # train | pseudo_label
    labeled: tuple = ("source",)        # labelled pools feeding the segmentation loss
    target: str | None = None           # unlabelled target pool: easy | hard | all
    classifier: str | None = None       # df | de | None

    def describe(self) -> str:
        if self.kind == "pseudo_label":
            return f"{self.name}({self.target})"
        pools = "+".join(self.labeled + ((self.target,) if self.target else ()))
        return f"{self.name}({pools}, {self.classifier or 'none'})"


@dataclass(frozen=True)
class CurriculumPlan:
    mode: str
    stages: tuple

    def __post_init__(self):
        produced = False
        for st in self.stages:
            if st.kind == "pseudo_label":
                produced = True
            elif "pseudo" in st.labeled and not produced:
                raise ValueError(f"stage {st.name} consumes pseudo-labels before they exist")

    @property
    def needs_split(self) -> bool:
        return any(st.target in ("easy", "hard") for st in self.stages)

    def names(self) -> list[str]:
        return [st.name for st in self.stages]


def build_plan(mode: str = "canonical") -> CurriculumPlan:
    if mode not in MODES:
        raise ValueError(f"unknown curriculum mode {mode!r}; choose from {', '.join(MODES)}")
    pretrain = Stage("pretrain")
    if mode == "no_curriculum":
        return CurriculumPlan(mode, (
            pretrain,
            Stage("stage1a", target="all", classifier="df"),
            Stage("stage1b", target="all", classifier="de"),
        ))
    first, second = ("hard", "easy") if mode in ("reverse_patches", "reverse_both") else ("easy", "hard")
    ca, cb = ("de", "df") if mode in ("reverse_features", "reverse_both") else ("df", "de")
    mixed = ("source", "pseudo")
    return CurriculumPlan(mode, (
        pretrain,
        Stage("stage1a", target=first, classifier=ca),
        Stage("stage1b", target=first, classifier=cb),
        Stage("pseudo_label", kind="pseudo_label", labeled=(), target=first),
        Stage("stage2a", labeled=mixed, target=second, classifier=ca),
        Stage("stage2b", labeled=mixed, target=second, classifier=cb),
    ))


# optimisation -----------------------------------------------------------

def poly_lr(base: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """base * (1 - iteration / max_iter) ** power."""
    if iteration < 0 or iteration > max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    if max_iter == 0:
        return base
    return base * (1.0 - iteration / max_iter) ** power


@dataclass
class OptimizerState:
    """SGD with momentum and L2 weight decay; ``max_iter=None`` keeps lr constant."""

    params: list
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    max_iter: int | None = None
    power: float = 0.9
    iteration: int = 0
    velocity: list = field(default=None)

    def __post_init__(self):
        if self.velocity is None:
            self.velocity = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if self.max_iter is None:
            return self.lr
        return poly_lr(self.lr, min(self.iteration, self.max_iter), self.max_iter, self.power)


def sgd_step(params: Sequence[Tensor], grads, state: OptimizerState) -> float:
    """v <- mu*v + g + wd*w; w <- w - lr*v. Clears ``p.grad``; returns the lr used."""
    if grads is None:
        grads = [p.grad for p in params]
    lr = state.current_lr()
    for i, (p, g, v) in enumerate(zip(params, grads, state.velocity)):
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {i} with shape {p.shape}")
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p.data
        p.data = p.data - lr * v
        p.grad = None
    state.iteration += 1
    return lr


def _make_opt(params, lr, cfg: RunConfig, n_iter: int) -> OptimizerState:
    return OptimizerState(list(params), lr, cfg.momentum, cfg.weight_decay,
                          max(n_iter, 1), cfg.poly_power)


# stages -----------------------------------------------------------------

@dataclass
class StageResult:
    name: str
    iterations: int
    seg: list = field(default_factory=list)
    adv: list = field(default_factory=list)
    disc_acc: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    domains_seen: set = field(default_factory=set)


def _draw(rng, pool, k):
    idx = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
    return [pool[i] for i in idx]


def _disc_accuracy(ds: np.ndarray, dt: np.ndarray) -> float:
    src = np.mean(ds > 0.5) + 0.5 * np.mean(ds == 0.5)
    tgt = np.mean(dt < 0.5) + 0.5 * np.mean(dt == 0.5)
    return float(0.5 * (src + tgt))


def run_stage(stage: Stage, bundle: ModelBundle, pools: dict, cfg: RunConfig,
              rng: np.random.Generator, log: list | None = None):
    """Train one stage in place; returns (bundle, StageResult)."""
    if stage.kind != "train":
        raise ValueError(f"run_stage cannot execute {stage.kind!r} stages")
    for name in stage.labeled + ((stage.target,) if stage.target else ()):
        if not pools.get(name):
            raise ValueError(f"stage {stage.name}: pool {name!r} is missing or empty")
    n_iter = cfg.iters_for(stage.name)
    dtype = np.dtype(cfg.dtype)
    pretrain = stage.classifier is None and stage.target is None
    base_lr = cfg.pretrain_lr if pretrain else cfg.lr
    seg_opt = _make_opt(bundle.seg.parameters(), base_lr, cfg, n_iter)
    disc = {"df": bundle.df, "de": bundle.de}.get(stage.classifier)
    disc_lr = cfg.disc_lr if cfg.disc_lr is not None else base_lr
    disc_opt = _make_opt(disc.parameters(), disc_lr, cfg, n_iter) if disc else None
    alternating = cfg.objective == "alternating"
    res = StageResult(stage.name, n_iter)
    b = cfg.batch_size

    for it in range(n_iter):
        labeled = _draw(rng, pools["source"], b)
        if "pseudo" in stage.labeled:
            labeled += _draw(rng, pools["pseudo"], b)
        target = _draw(rng, pools[stage.target], b) if disc else []
        batch = labeled + target
        res.domains_seen.update(s.domain for s in batch)
        if pretrain and any(s.domain != "source" for s in batch):
            raise AssertionError("pretraining drew a target-domain sample")

        x = np.stack([s.image for s in batch]).astype(dtype)
        y = np.stack([s.pseudo_label if s.pseudo_label is not None else s.label
                      for s in labeled])
        feats, logits = forward_seg(bundle.seg, Tensor(x))
        n_lab = len(labeled)
        l_seg = seg_loss(dc.take_rows(logits, 0, n_lab), y, ignore_index=IGNORE_INDEX)

        adv_val = float("nan")
        if disc is None:
            loss = assemble_objective(l_seg, None, cfg.lam, "generator")
        else:
            # adversarial source side: the source rows of the labelled batch
            n_src = b if len(pools["source"]) >= b else len(pools["source"])
            src_in, tgt_in = _disc_inputs(stage.classifier, feats, logits, n_src, n_lab)
            if alternating:
                d_out = _disc_forward(stage.classifier, disc, dc.concat(
                    [src_in.detach(), tgt_in.detach()]), 0.0)
                l_d = adv_loss(dc.take_rows(d_out, 0, n_src), dc.take_rows(d_out, n_src, d_out.shape[0]))
                assemble_objective(l_seg, l_d, cfg.lam, "discriminator").backward()
                sgd_step(disc.parameters(), None, disc_opt)
                d_out = _disc_forward(stage.classifier, disc, dc.concat([src_in, tgt_in]), None)
                l_adv = adv_loss(dc.take_rows(d_out, 0, n_src), dc.take_rows(d_out, n_src, d_out.shape[0]))
                loss = assemble_objective(l_seg, l_adv, cfg.lam, "generator", reversed_input=False)
            else:
                d_out = _disc_forward(stage.classifier, disc, dc.concat([src_in, tgt_in]), cfg.lam)
                l_adv = adv_loss(dc.take_rows(d_out, 0, n_src), dc.take_rows(d_out, n_src, d_out.shape[0]))
                loss = assemble_objective(l_seg, l_adv, cfg.lam, "generator")
            adv_val = l_adv.item()
            res.disc_acc.append(_disc_accuracy(d_out.data[:n_src], d_out.data[n_src:]))

        loss.backward()
        lr = sgd_step(bundle.seg.parameters(), None, seg_opt)
        if disc is not None:
            if alternating:
                disc.zero_grad()
            else:
                sgd_step(disc.parameters(), None, disc_opt)
        res.seg.append(l_seg.item())
        res.adv.append(adv_val)
        res.lr.append(lr)
        if log is not None:
            log.append(f"{stage.name}\t{it}\t{lr:.6e}\t{l_seg.item():.6e}\t{adv_val:.6e}")

    bundle.advance(stage.name, n_iter)
    return bundle, res


def _disc_inputs(kind, feats, logits, n_src, n_lab):
    if kind == "df":
        src, tgt = dc.take_rows(feats, 0, n_src), dc.take_rows(feats, n_lab, feats.shape[0])
    else:
        src = entropy_map(dc.take_rows(logits, 0, n_src)).values
        tgt = entropy_map(dc.take_rows(logits, n_lab, logits.shape[0])).values
    return src, tgt


def _disc_forward(kind, disc, x, grl_scale):
    """grl_scale None means plain forward (no reversal, no detaching)."""
    if kind == "df":
        if grl_scale is None:
            return disc(x)
        return forward_df(disc, x, grl_scale)
    if grl_scale is None:
        return forward_de(disc, x)
    if grl_scale == 0:
        return forward_de(disc, x.detach())
    return forward_de(disc, dc.grad_reverse(x, grl_scale))


# evaluation -------------------------------------------------------------

def predict_labels(bundle: ModelBundle, samples: Sequence[PatchSample], batch_size: int = 32):
    dtype = bundle.seg.head.weight.dtype
    out = []
    with dc.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = np.stack([s.image for s in chunk]).astype(dtype)
            _, logits = forward_seg(bundle.seg, Tensor(x))
            out.extend(dc.argmax(logits, axis=1).astype(np.uint8))
    return out


def evaluate(bundle: ModelBundle, samples: Sequence[PatchSample], n_classes: int | None = None) -> dict:
    n_classes = n_classes or bundle.seg.n_classes
    if not samples:
        raise ValueError("cannot evaluate on an empty split")
    if any(s.label is None for s in samples):
        raise ValueError("evaluation split must carry ground-truth labels")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for s, pred in zip(samples, predict_labels(bundle, samples)):
        cm += confusion(pred, s.label, n_classes)
    out = summarize(cm)
    out["confusion"] = cm.tolist()
    return out


# full run ---------------------------------------------------------------

def _curve(values, every=50):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return []
    return [float(np.mean(arr[i:i + every])) for i in range(0, arr.size, every)]


def new_bundle(cfg: RunConfig, seed: int) -> ModelBundle:
    return ModelBundle.create(n_classes=cfg.class_count, seed=seed, dtype=np.dtype(cfg.dtype))


def run_curriculum(plan: CurriculumPlan, bench: Benchmark, cfg: RunConfig,
                   seed: int | None = None, out_dir=None, bundle: ModelBundle | None = None) -> dict:
    """Execute the plan's stages in order and return the run report.

    With ``out_dir`` set, checkpoints after every stage, the split manifest,
    the per-iteration log and ``report.json`` are written there. A supplied
    ``bundle`` that has already been pretrained skips the pretrain stage.
    """
    from .report import write_report

    seed = cfg.seed if seed is None else seed
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    bundle = bundle if bundle is not None else new_bundle(cfg, seed)
    log: list[str] = []
    executed: list[str] = []

    pools: dict = {"source": list(bench.source), "all": list(bench.target)}
    stages_report = []
    split_info: dict = {}

    for st in plan.stages:
        if st.name == "pretrain" and "pretrain" in bundle.history:
            executed.append(st.name)
            stages_report.append(_stage_entry(st, None, bundle, bench, skipped=True))
            continue
        if st.kind == "pseudo_label":
            src_pool = pools[st.target]
            labels = generate_pseudo_labels(bundle, src_pool, threshold=cfg.pseudo_threshold)
            by_id = {pl.patch_id: pl for pl in labels}
            pools["pseudo"] = [
                PatchSample(s.image, None, s.domain, s.id, s.difficulty, by_id[s.id].labels)
                for s in src_pool
            ]
            executed.append(st.name)
            log.append(f"{st.name}\tend\tfrom={st.target}\tn={len(labels)}")
            stages_report.append({"name": st.name, "kind": st.kind, "from": st.target,
                                  "n": len(labels), "checkpoint_id": labels[0].checkpoint_id
                                  if labels else None})
            continue

        if st.target in ("easy", "hard") and ("easy" not in pools or cfg.rescore):
            split_info = _split(bundle, bench.target, cfg.gamma, pools, out)
        # one stream per stage, so resuming from a checkpoint replays the same batches
        rng = np.random.default_rng([seed, 1, bundle.stage_index])
        bundle, res = run_stage(st, bundle, pools, cfg, rng, log)
        executed.append(st.name)
        if st.name == "pretrain" and res.domains_seen - {"source"}:
            raise AssertionError("pretraining touched target-domain data")
        entry = _stage_entry(st, res, bundle, bench)
        stages_report.append(entry)
        val, test = _miou(entry["val"]), _miou(entry["test"])
        log.append(f"{st.name}\tend\tval_miou={val:.6f}\ttest_miou={test:.6f}")
        logger.info("%s: val mIoU %.4f test mIoU %.4f", st.describe(), val, test)
        if out is not None:
            save_checkpoint(bundle, out / "checkpoints" / f"{bundle.stage_index:02d}_{st.name}.ckpt")

    if executed != plan.names():
        raise AssertionError(f"executed stages {executed} differ from plan {plan.names()}")

    trained = [e for e in stages_report if e.get("kind") == "train"]
    # ties and missing validation data resolve to the earliest stage
    best = max(trained, key=lambda e: (np.nan_to_num(_miou(e["val"]), nan=-np.inf),
                                       -trained.index(e)))
    report = {
        "mode": plan.mode,
        "seed": seed,
        "plan": [st.describe() for st in plan.stages],
        "config": cfg.to_dict(),
        "split": {**bench.stats(), **split_info},
        "stages": stages_report,
        "final": {"stage": trained[-1]["name"], "test": trained[-1]["test"]},
        "best": {"stage": best["name"], "test": best["test"],
                 "val_miou": best["val"]["miou"] if best["val"] else None},
    }
    if out is not None:
        (out / "train.log").write_text("\n".join(log) + "\n", encoding="utf-8")
        write_report(report, out / "report.json")
    return report


def _split(bundle, target_pool, gamma, pools, out) -> dict:
    scores = score_patches(bundle.seg, target_pool)
    ranked = rank_scores(scores, gamma)
    by_id = {s.id: s for s in target_pool}
    bucket = {r.patch_id: r.bucket for r in ranked}
    for name in ("easy", "hard"):
        pools[name] = [PatchSample(by_id[r.patch_id].image, None, "target", r.patch_id, name)
                       for r in ranked if bucket[r.patch_id] == name]
    if out is not None:
        write_split_manifest(ranked, out / "split.tsv")
    vals = np.array([r.score for r in ranked])
    easy = np.array([r.score for r in ranked if r.bucket == "easy"])
    hard = np.array([r.score for r in ranked if r.bucket == "hard"])
    return {
        "n_easy": int(easy.size), "n_hard": int(hard.size),
        "score_min": float(vals.min()), "score_max": float(vals.max()),
        "score_median": float(np.median(vals)),
        "easy_mean_score": float(easy.mean()) if easy.size else None,
        "hard_mean_score": float(hard.mean()) if hard.size else None,
    }


def _evaluate_split(bundle, samples):
    # empty split (e.g. no labelled target data supplied) -> no metrics
    return evaluate(bundle, samples) if samples else None


def _miou(metrics) -> float:
    return float("nan") if metrics is None else metrics["miou"]


def _stage_entry(st: Stage, res: StageResult | None, bundle, bench, skipped=False) -> dict:
    entry = {
        "name": st.name, "kind": st.kind, "classifier": st.classifier,
        "labeled": list(st.labeled), "target": st.target,
        "stage_index": bundle.stage_index,
        "val": _evaluate_split(bundle, bench.target_val),
        "test": _evaluate_split(bundle, bench.target_test),
    }
    if st.name == "pretrain":
        entry["source_test"] = _evaluate_split(bundle, bench.source_test)
    if skipped:
        entry["skipped"] = True
    elif res is not None:
        entry["iterations"] = res.iterations
        entry["seg_curve"] = _curve(res.seg)
        if st.classifier:
            entry["adv_curve"] = _curve(res.adv)
            entry["disc_acc_curve"] = _curve(res.disc_acc)
    return entry

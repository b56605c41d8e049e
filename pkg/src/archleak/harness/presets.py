"""Preset experiments. Each preset expands into cells; each (cell, seed) yields one record."""

from __future__ import annotations

import dataclasses
import functools
from pathlib import Path
from typing import Callable

import numpy as np
import torch.nn.functional as F
from PIL import Image

from .. import aia, gia, mia
from ..arch_lab import (Activation, ArchSpec, Norm, StemSpec, build, tiny_ladder_spec,
                        tiny_vit_spec)
from ..data import ImageData, load_cifar10, load_manifest, synthetic_images
from ..defense import DpConfig, apply_component_defense
from ..evalkit import loss_histogram
from ..train_core import (RecipeConfig, default_recipe, make_split, overfit_recipe,
                          predict_logits, train)
from .config import ExperimentConfig, Preset

SNAPSHOT_CHOICES = (1, 50, 100, 500, 1000, 1500, 2000, 2500, 3000)
SHADOW_SEED_OFFSET = 100_000


@dataclasses.dataclass
class Outcome:
    metrics: dict
    spec: ArchSpec | None = None
    recipe: RecipeConfig | None = None
    artifacts: dict = dataclasses.field(default_factory=dict)


ArtifactFn = Callable[[str], Path]


# ------------------------------------------------------------------ builders


def make_data(d: dict, n: int | None = None, seed_offset: int = 0) -> ImageData:
    n = d.get("n") if n is None else n
    num_classes = d.get("num_classes", 10)
    if d["source"] == "synthetic":
        return synthetic_images(n, num_classes, d["size"], seed=d["seed"] + seed_offset,
                                signal=d["signal"], noise=d["noise"],
                                palettes=d.get("palettes", 0) or 0,
                                palette_strength=d.get("palette_strength", 0.35),
                                attribute=d.get("attribute") or "palette")
    if d["source"] == "cifar10":
        data = load_cifar10(d["root"], train=True)
    else:
        data = load_manifest(d["root"], d.get("attribute"), d.get("manifest", "manifest.csv"))
    return data.subset(np.arange(min(n or len(data), len(data))))


def make_spec(arch: dict, step: int | None, input_shape, num_classes: int = 10) -> ArchSpec:
    if "spec" in arch:
        return ArchSpec.from_dict({**arch["spec"], "input_shape": list(input_shape),
                                   "num_classes": num_classes})
    if arch["family"] == "vit":
        return tiny_vit_spec(arch["patch"], arch["dim"], arch["depth"], arch["heads"],
                             arch.get("mlp_ratio", 4.0), num_classes, tuple(input_shape))
    return tiny_ladder_spec(step, num_classes, tuple(input_shape), arch["width_div"],
                            arch["depth_div"])


def make_recipe(r: dict) -> RecipeConfig:
    r = dict(r)
    base = default_recipe(r.pop("kind")) if "kind" in r else overfit_recipe()
    return base.override(**r) if r else base


def _input_shape(d: dict) -> tuple[int, int, int]:
    return (3, d["size"], d["size"])


def _snapshots(iterations: int) -> tuple[int, ...]:
    return tuple(sorted({s for s in SNAPSHOT_CHOICES if s <= iterations} | {iterations}))


# ------------------------------------------------------------------ cells


def cells(cfg: ExperimentConfig) -> list[dict]:
    r = cfg.resolved()
    arch, atk = r["arch"], r["attack"]
    p = cfg.preset
    steps = arch.get("steps") or [None]
    if p in (Preset.MIA_NETWORK, Preset.MIA_LIRA, Preset.AIA, Preset.GIA_LADDER):
        return [{"step": s} for s in steps]
    if p is Preset.GIA_SEGMENT_VIT:
        return [{"selection": s} for s in atk["selections"]]
    if p is Preset.ACTIVATION_ABLATION:
        return [{"activation": a, "mask": "".join("1" if m else "0" for m in mask)}
                for a in atk["activations"] for mask in atk["masks"]]
    if p is Preset.PATCHIFY_LN_ABLATION:
        return [{"stem": s, "norm": n} for s in atk["stems"] for n in atk["norms"]]
    if p is Preset.DEFENSE_COMPONENTS:
        return [{"toggles": "+".join(sorted(ts)) or "none"} for ts in atk["toggle_sets"]]
    return [{"step": s, "sigma": float(sig)} for s in steps for sig in atk["sigmas"]]


# ------------------------------------------------------------------ gradient inversion


def _gia_spec(cfg: ExperimentConfig, cell: dict) -> ArchSpec:
    r = cfg.resolved()
    arch, shape = r["arch"], _input_shape(r["data"])
    p = cfg.preset
    if p is Preset.GIA_SEGMENT_VIT:
        return make_spec(arch, None, shape)
    if p is Preset.GIA_LADDER:
        return make_spec(arch, cell["step"], shape)
    base = make_spec(arch, arch["base_step"], shape)
    if p is Preset.ACTIVATION_ABLATION:
        mask = tuple(c == "1" for c in cell["mask"])
        return dataclasses.replace(base, activation=Activation(cell["activation"]),
                                   activation_mask=mask)
    if p is Preset.PATCHIFY_LN_ABLATION:
        stem = StemSpec(7, 2, True) if cell["stem"] == "ResNet" else StemSpec(4, 4, False)
        return dataclasses.replace(base, stem=stem, norm=Norm(cell["norm"]))
    toggles = [] if cell["toggles"] == "none" else cell["toggles"].split("+")
    return apply_component_defense(base, toggles)


def run_gia(cfg: ExperimentConfig, cell: dict, seed: int, artifact: ArtifactFn) -> Outcome:
    r = cfg.resolved()
    atk, d = r["attack"], r["data"]
    spec = _gia_spec(cfg, cell)
    model = build(spec, seed)
    images = make_data({**d, "n": atk["batch"]}, seed_offset=seed)
    gcfg = gia.GiaConfig(cost=atk["cost"], tv_weight=atk["tv_weight"], lr=atk["lr"],
                         iterations=atk["iterations"], seed=seed,
                         selection=cell.get("selection", gia.ALL),
                         snapshots=_snapshots(atk["iterations"]))
    res = gia.attack(model, images.x, images.y, gcfg)
    path = artifact("snapshots.npz")
    np.savez_compressed(path, ground_truth=images.x.numpy(), reconstruction=res.reconstruction.numpy(),
                        iterations=np.array(sorted(res.snapshots)),
                        snapshots=np.stack([res.snapshots[i].numpy() for i in sorted(res.snapshots)]),
                        loss_trace=np.array(res.loss_trace))
    strip = np.concatenate([images.x[0].numpy()] + [res.snapshots[i][0].numpy()
                                                     for i in sorted(res.snapshots)], axis=2)
    png = artifact("snapshots.png")
    Image.fromarray((strip.transpose(1, 2, 0) * 255).round().astype(np.uint8)).save(png)
    trace = artifact("loss_trace.csv")
    np.savetxt(trace, np.c_[np.arange(1, len(res.loss_trace) + 1), res.loss_trace],
               delimiter=",", header="iteration,cost", comments="", fmt=["%d", "%.8g"])
    metrics = dict(res.metrics)
    metrics["final_cost"] = res.loss_trace[-1]
    metrics["initial_cost"] = res.loss_trace[0]
    if res.flags:
        metrics["flags"] = list(res.flags)
    return Outcome(metrics, spec, None, {"snapshots": str(path), "snapshot_strip": str(png),
                                         "loss_trace": str(trace)})


# ------------------------------------------------------------------ membership / attribute


def _save_scores(artifact: ArtifactFn, result: mia.MembershipResult) -> str:
    path = artifact("scores.npz")
    np.savez_compressed(path, scores=result.scores, labels=result.labels)
    return str(path)


def _losses(model, data: ImageData) -> np.ndarray:
    logits = predict_logits(model.network, data.x)
    return F.cross_entropy(logits, data.y, reduction="none").numpy()


def run_mia_network(cfg: ExperimentConfig, cell: dict, seed: int, artifact: ArtifactFn) -> Outcome:
    r = cfg.resolved()
    data = make_data(r["data"])
    spec = make_spec(r["arch"], cell["step"], data.input_shape, data.num_classes)
    recipe = make_recipe(r["recipe"])
    split = make_split(len(data), seed)
    v_in, v_out, s_in, s_out = (data.subset(ix) for ix in split.subsets)
    victim_model = build(spec, seed)
    metrics = {}
    if r["attack"]["victim"] == "trained":
        v = train(victim_model, v_in, recipe, seed, test_data=v_out, split=split)
        metrics.update(victim_train_acc=v.train_acc, victim_test_acc=v.test_acc,
                       overfitting=v.train_acc - v.test_acc)
    shadow = train(build(spec, seed + SHADOW_SEED_OFFSET), s_in, recipe,
                   seed + SHADOW_SEED_OFFSET, test_data=s_out)
    result = mia.network_attack(victim_model, shadow.model, v_in, v_out, s_in, s_out, seed,
                                r["attack"]["epochs"])
    metrics.update(result.metrics())
    metrics.update(shadow_train_acc=shadow.train_acc, shadow_test_acc=shadow.test_acc)
    hist = loss_histogram(_losses(victim_model, v_in), _losses(victim_model, v_out))
    hist_path = artifact("loss_histogram.csv")
    hist.to_csv(hist_path)
    return Outcome(metrics, spec, recipe, {"scores": _save_scores(artifact, result),
                                           "loss_histogram": str(hist_path)})


def _victim_members(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed + 7_777)
    members = np.zeros(n, bool)
    members[rng.permutation(n)[: n // 2]] = True
    return members


def run_lira(cfg: ExperimentConfig, cell: dict, seed: int, artifact: ArtifactFn,
             dp: DpConfig | None = None) -> Outcome:
    r = cfg.resolved()
    pool = make_data(r["data"])
    spec = make_spec(r["arch"], cell["step"], pool.input_shape, pool.num_classes)
    recipe = make_recipe(r["recipe"])
    train_fn = functools.partial(train, dp=dp) if dp else train
    members = _victim_members(len(pool), seed)
    victim_model = build(spec, seed)
    metrics = {}
    if r["attack"].get("victim", "trained") == "trained":
        v = train_fn(victim_model, pool.subset(np.nonzero(members)[0]), recipe, seed,
                     test_data=pool.subset(np.nonzero(~members)[0]))
        metrics.update(victim_train_acc=v.train_acc, victim_test_acc=v.test_acc,
                       overfitting=v.train_acc - v.test_acc)
    n_shadows = r["attack"]["shadows"]
    base = seed * 1_000 + SHADOW_SEED_OFFSET
    ensemble = mia.lira_build(lambda s: build(spec, s), pool, n_shadows,
                              list(range(base, base + n_shadows)), recipe, train_fn,
                              mask_seed=seed)
    scores = mia.lira_scores(ensemble, victim_model)
    s = np.array([sc.log_lratio for sc in scores])
    result = mia.MembershipResult(s, members.astype(int), (s > 0).astype(int))
    metrics.update(result.metrics())
    metrics["global_variance_fallbacks"] = int(sum(sc.global_variance for sc in scores))
    csv_path = artifact("lira_scores.csv")
    mia.dump_scores(scores, csv_path)
    return Outcome(metrics, spec, recipe, {"scores": _save_scores(artifact, result),
                                           "lira_scores": str(csv_path)})


def run_dpsgd(cfg: ExperimentConfig, cell: dict, seed: int, artifact: ArtifactFn) -> Outcome:
    atk = cfg.resolved()["attack"]
    dp = DpConfig(clip_norm=atk["clip_norm"], noise_multiplier=cell["sigma"],
                  target_tags=atk["target"], seed=seed)
    out = run_lira(cfg, cell, seed, artifact, dp)
    out.metrics["dp"] = dp.to_dict()
    return out


def run_aia(cfg: ExperimentConfig, cell: dict, seed: int, artifact: ArtifactFn) -> Outcome:
    r = cfg.resolved()
    data = make_data(r["data"])
    if data.attr is None:
        raise ValueError("Aia needs data with an attribute (set data.palettes or a manifest attribute)")
    spec = make_spec(r["arch"], cell["step"], data.input_shape, data.num_classes)
    recipe = make_recipe(r["recipe"])
    split = make_split(len(data), seed)
    v_in, v_out, aux, _ = (data.subset(ix) for ix in split.subsets)
    v = train(build(spec, seed), v_in, recipe, seed, test_data=v_out, split=split)
    result = aia.attribute_attack(v.model, aux, v_in, seed, r["attack"]["layer"],
                                  r["attack"]["epochs"])
    metrics = result.metrics()
    metrics.update(victim_train_acc=v.train_acc, victim_test_acc=v.test_acc)
    pairs = aia.representation_pairs(v.model, v_in, r["attack"]["layer"], result.alphabet)
    path = artifact("pairs.csv")
    pairs.to_csv(path)
    return Outcome(metrics, spec, recipe, {"pairs": str(path)})


RUNNERS = {
    Preset.MIA_NETWORK: run_mia_network,
    Preset.MIA_LIRA: run_lira,
    Preset.AIA: run_aia,
    Preset.GIA_LADDER: run_gia,
    Preset.GIA_SEGMENT_VIT: run_gia,
    Preset.ACTIVATION_ABLATION: run_gia,
    Preset.PATCHIFY_LN_ABLATION: run_gia,
    Preset.DEFENSE_COMPONENTS: run_gia,
    Preset.DEFENSE_DPSGD: run_dpsgd,
    Preset.DEFENSE_DPSGD_STEM: run_dpsgd,
}

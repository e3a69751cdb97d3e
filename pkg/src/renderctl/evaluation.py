"""Evaluation protocols: held-out views, left-half extrapolation, code swaps, ablations."""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptation import adapt_photo, augment_realism, finetune_realism
from .exceptions import RenderctlError, ValidationError
from .metrics import MetricsReport, compute_psnr
from .renderer import RenderOptions, render_image

log = logging.getLogger(__name__)

TOGGLES = ("tone", "shadow", "realism")


@dataclass
class EvalOptions:
    adapt_steps: int = 500
    adapt_lr: float = 1e-2
    finetune_steps: int = 300
    render: RenderOptions = field(default_factory=RenderOptions)


def _fit_mask(dataset, i, cols=None):
    H, W = dataset.shape
    m = np.ones((H, W), bool)
    if dataset.occluder_masks is not None:
        m &= ~dataset.occluder_masks[i]
    if cols is not None:
        m[:, cols:] = False
    return m


def eval_views(model, decoder, dataset, realism=None, options=EvalOptions(), label="",
               keep_outputs=False):
    """Adapt codes on each full held-out photo, render it, score with and without realism."""
    plain = MetricsReport("full-view", label=f"{label}plain")
    aug = MetricsReport("full-view", label=f"{label}realism") if realism is not None else None
    outputs = {}
    for i, (fid, cam) in enumerate(zip(dataset.frame_ids, dataset.cameras)):
        photo = dataset.images[i]
        mask = _fit_mask(dataset, i)
        try:
            res = adapt_photo(model, decoder, photo, cam, mask, options.adapt_steps,
                              options.adapt_lr, options=options.render)
        except RenderctlError as exc:
            plain.failures.append({"image_id": fid, "error": str(exc)})
            continue
        rgb = render_image(model, cam, res.codes, decoder, options=options.render)["rgb"]
        plain.add(fid, rgb, photo, adapt_reduction=res.reduction)
        out = {"codes": res.codes, "render": rgb, "adaptation": res}
        if realism is not None:
            net, _ = finetune_realism(realism, rgb, photo, mask, options.finetune_steps)
            enhanced = augment_realism(net, rgb)
            aug.add(fid, enhanced, photo)
            out["augmented"] = enhanced
        if keep_outputs:
            outputs[fid] = out
    return {"plain": plain, "realism": aug, "outputs": outputs}


def eval_left_half(model, decoder, dataset, realism=None, options=EvalOptions(), label=""):
    """Fit codes on the left half (people masked), render the full view, score both halves.

    Returns ``{"plain": report, "realism": report or None}``; each image score
    carries ``right_psnr``, ``full_psnr`` (also the headline ``psnr``) and the
    adaptation's masked-MSE reduction.
    """
    if len(dataset) == 0:
        raise ValidationError("left-half evaluation needs a non-empty test split")
    H, W = dataset.shape
    half = W // 2
    reports = {"plain": MetricsReport("left-half", label=f"{label}plain"),
               "realism": MetricsReport("left-half", label=f"{label}realism")
               if realism is not None else None}
    for i, (fid, cam) in enumerate(zip(dataset.frame_ids, dataset.cameras)):
        photo = dataset.images[i]
        mask = _fit_mask(dataset, i, cols=half)
        try:
            res = adapt_photo(model, decoder, photo, cam, mask, options.adapt_steps,
                              options.adapt_lr, options=options.render)
        except RenderctlError as exc:
            for r in reports.values():
                if r is not None:
                    r.failures.append({"image_id": fid, "error": str(exc)})
            continue
        rgb = render_image(model, cam, res.codes, decoder, options=options.render)["rgb"]
        preds = {"plain": rgb}
        if realism is not None:
            net, _ = finetune_realism(realism, rgb, photo, mask, options.finetune_steps)
            preds["realism"] = augment_realism(net, rgb)
        for key, pred in preds.items():
            reports[key].add(fid, pred, photo,
                             right_psnr=compute_psnr(pred[:, half:], photo[:, half:]),
                             full_psnr=compute_psnr(pred, photo),
                             adapt_reduction=res.reduction)
    return reports


def swap_environment_codes(codes_a, codes_b):
    """``codes_a`` with its environment code replaced by ``codes_b``'s."""
    from .field import LatentCodes
    return LatentCodes(codes_b.environment.clone(), codes_a.shadow.clone(),
                       codes_a.tone.clone())


def eval_code_swap(model, decoder, scene, dataset, codes, options=RenderOptions()):
    """For each test view, swap in ``l_e`` of a view under another illumination condition.

    ``codes`` maps frame id -> adapted codes.  The swapped render is compared
    with the ground truth under the other condition's lighting (own shadow and
    tone) and with the original ground truth.  Returns a list of per-view dicts.
    """
    from .synthdata import render_ground_truth

    frames = dataset.meta["frames"]
    conds = [f["condition"] for f in frames]
    rows = []
    for i, fid in enumerate(dataset.frame_ids):
        partners = [j for j in range(len(frames)) if conds[j] != conds[i]]
        if not partners or fid not in codes:
            continue
        j = min(partners, key=lambda k: (abs(k - i), k))
        if dataset.frame_ids[j] not in codes:
            continue
        swapped = swap_environment_codes(codes[fid], codes[dataset.frame_ids[j]])
        cam = dataset.cameras[i]
        rgb = render_image(model, cam, swapped, decoder, options=options)["rgb"]
        gt_swap = render_ground_truth(scene, cam, conds[i], frames[i]["tone"],
                                      env_condition=conds[j])["image"]
        gt_own = dataset.images[i]
        p_swap, p_own = compute_psnr(rgb, gt_swap), compute_psnr(rgb, gt_own)
        rows.append({"frame_id": fid, "partner": dataset.frame_ids[j], "psnr_swapped_gt": p_swap,
                     "psnr_original_gt": p_own, "closer_to_swapped": p_swap > p_own})
    return rows


def check_matched_seeds(configs):
    seeds = {c.seed for c in configs}
    if len(seeds) != 1:
        raise ValidationError(f"ablation runs use different seeds: {sorted(seeds)}")


def ablation_configs(base, toggles):
    """Training configs per run; realism needs no retraining."""
    bad = set(toggles) - set(TOGGLES)
    if bad:
        raise ValidationError(f"unknown ablation toggles {sorted(bad)}")
    runs = {"full": base}
    if "tone" in toggles:
        runs["no_tone"] = replace(base, use_tone=False)
    if "shadow" in toggles:
        runs["no_shadow"] = replace(base, use_shadow=False)
    check_matched_seeds(runs.values())
    return runs


def run_ablation(base_config, toggles, geometry, distilled, train, test, decoder, realism=None,
                 options=EvalOptions(), cache=None, models=None, logger=None):
    """Matched runs that differ only in the toggled component, scored by the left-half protocol.

    Returns ``{"reports": {run: MetricsReport}, "table": [...], "models": {...}}``.
    Headline score is full-view PSNR; runs without ``realism`` in their name use
    the realism network when one is given.
    """
    from .training import train_rerender

    runs = ablation_configs(base_config, toggles)
    models = dict(models or {})
    reports = {}
    for name, cfg in runs.items():
        if name not in models:
            models[name] = train_rerender(geometry, distilled, train, decoder, cfg, logger,
                                          cache=cache)
        with_realism = realism if realism is not None else None
        rep = eval_left_half(models[name], decoder, test, with_realism, options, f"{name}/")
        if name == "full":
            reports["full"] = rep["realism"] or rep["plain"]
            if "realism" in toggles and realism is not None:
                reports["no_realism"] = rep["plain"]
        else:
            reports[name] = rep["realism"] or rep["plain"]
    table = [{"run": k, "mean_full_psnr": r.mean("full_psnr"),
              "mean_right_psnr": r.mean("right_psnr"), "mean_ssim": r.mean("ssim")}
             for k, r in reports.items()]
    return {"reports": reports, "table": table, "models": models}

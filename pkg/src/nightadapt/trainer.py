"""Alternating adversarial optimization of the relight + segmentation
generator against the two domain discriminators, plus the source-only
pretraining stage, schedules, augmentation and checkpointed resume."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .adversarial import disc_loss, gen_adv_loss
from .checkpoint import (build_networks, load_checkpoint, restore_networks,
                         save_checkpoint)
from .core import Config, IGNORE_INDEX, DegenerateInputError, LabelSet, validate_config
from .data import DatasetIndex, class_proportions, load_image, load_label
from .relight import light_loss
from .reweight import (clamp_absent_proportions, normalize_weights,
                       raw_class_weights)
from .segmentation import weighted_ce
from .static_supervision import (make_pseudo_label, restrict_to_static,
                                 static_loss, static_loss_ce, static_loss_focal)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iter", "lr", "l_tv", "l_exp", "l_ssim", "l_seg",
                "l_static", "l_adv", "l_total", "d_d", "d_n")


def poly_lr(base, iteration, max_iter, power):
    """base * (1 - iteration / max_iter) ** power."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base * (1.0 - iteration / max_iter) ** power


def _draw_params(rng, scale_range):
    # all four draws happen unconditionally to keep the stream stable
    return {
        "scale": float(rng.uniform(scale_range[0], scale_range[1])),
        "flip": bool(rng.random() < 0.5),
        "off_y": float(rng.random()),
        "off_x": float(rng.random()),
    }


def augment_sample(image, label, crop, scale_range, flip, rng,
                   ignore_index=IGNORE_INDEX, params=None):
    """Random scale, crop to crop x crop (padding as needed), horizontal flip.

    Images get bilinear scaling and zero padding; labels nearest-neighbour
    scaling and ignore_index padding. Pass `params` (a previous return
    value) to replay identical geometry on another image, e.g. on the
    night half of a day/night pair. Returns (image, label, params).
    """
    if params is None:
        params = _draw_params(rng, scale_range)
    h, w = image.shape[-2:]
    nh = max(1, int(round(h * params["scale"])))
    nw = max(1, int(round(w * params["scale"])))
    img = F.interpolate(image.unsqueeze(0), size=(nh, nw), mode="bilinear",
                        align_corners=False).squeeze(0)
    lbl = None
    if label is not None:
        lbl = F.interpolate(label.view(1, 1, h, w).to(torch.float32),
                            size=(nh, nw), mode="nearest").view(nh, nw).long()
    pad_h, pad_w = max(crop - nh, 0), max(crop - nw, 0)
    if pad_h or pad_w:
        img = F.pad(img, (0, pad_w, 0, pad_h), value=0.0)
        if lbl is not None:
            lbl = F.pad(lbl, (0, pad_w, 0, pad_h), value=ignore_index)
        nh, nw = nh + pad_h, nw + pad_w
    y0 = int(params["off_y"] * (nh - crop + 1))
    x0 = int(params["off_x"] * (nw - crop + 1))
    img = img[:, y0:y0 + crop, x0:x0 + crop]
    if lbl is not None:
        lbl = lbl[y0:y0 + crop, x0:x0 + crop]
    if flip and params["flip"]:
        img = torch.flip(img, [-1])
        if lbl is not None:
            lbl = torch.flip(lbl, [-1])
    return img, lbl, params


class _Cycler:
    """Epoch-style index iterator: reshuffles whenever the list is exhausted."""

    def __init__(self, n, rng):
        self.n = n
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self, rng):
        if self.pos >= self.n:
            self.order = rng.permutation(self.n)
            self.pos = 0
        i = int(self.order[self.pos])
        self.pos += 1
        return i

    def state(self):
        return {"order": [int(i) for i in self.order], "pos": self.pos}

    @classmethod
    def restore(cls, state):
        obj = cls.__new__(cls)
        obj.order = np.asarray(state["order"], dtype=np.int64)
        obj.n = len(obj.order)
        obj.pos = int(state["pos"])
        return obj


class _ImageCache:
    """Decoded-file cache; purely an I/O optimization, no effect on results."""

    def __init__(self, loader, max_entries=4096):
        self.loader = loader
        self.max_entries = max_entries
        self._store = {}

    def __call__(self, path):
        key = str(path)
        if key not in self._store:
            if len(self._store) >= self.max_entries:
                self._store.clear()
            self._store[key] = self.loader(path)
        return self._store[key]


@dataclass
class TrainState:
    cfg: Config
    labels: LabelSet
    raw_weights: torch.Tensor
    nets: dict
    optimizers: dict
    iteration: int
    rng: np.random.Generator
    cyclers: dict = field(default_factory=dict)


def source_weight_vector(cfg: Config, source_index: DatasetIndex,
                         labels: LabelSet) -> torch.Tensor:
    """Raw (-log proportion) weights counted once from the source split."""
    proportions = clamp_absent_proportions(
        class_proportions(source_index, labels))
    return raw_class_weights(proportions)


def _generator_parameters(cfg, nets):
    modules = [nets["seg"]]
    if cfg.relight_enabled:
        modules.insert(0, nets["relight"])
    decay, no_decay = [], []
    for module in modules:
        for p in module.parameters():
            (decay if p.dim() >= 2 else no_decay).append(p)
    return decay, no_decay


def _build_optimizers(cfg, nets):
    decay, no_decay = _generator_parameters(cfg, nets)
    # weight decay applies to convolution weights only
    opt_gen = torch.optim.SGD(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.base_lr, momentum=cfg.momentum)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_dd = torch.optim.Adam(nets["disc_day"].parameters(), lr=cfg.disc_lr, betas=betas)
    opt_dn = torch.optim.Adam(nets["disc_night"].parameters(), lr=cfg.disc_lr, betas=betas)
    return {"gen": opt_gen, "disc_day": opt_dd, "disc_night": opt_dn}


def init_state(cfg: Config, labels: LabelSet, raw_weights) -> TrainState:
    cfg = validate_config(cfg)
    torch.manual_seed(cfg.seed)
    relight, seg, disc_day, disc_night = build_networks(cfg, labels.num_classes)
    nets = {"relight": relight, "seg": seg,
            "disc_day": disc_day, "disc_night": disc_night}
    return TrainState(
        cfg=cfg, labels=labels,
        raw_weights=torch.as_tensor(raw_weights, dtype=torch.float64),
        nets=nets, optimizers=_build_optimizers(cfg, nets),
        iteration=0, rng=np.random.default_rng(cfg.seed))


def _train_weight_vectors(state):
    cfg = state.cfg
    w_train = normalize_weights(state.raw_weights, cfg.std_train, cfg.weight_avg)
    if cfg.reweight_pseudo:
        w_pseudo = w_train
    else:
        w_pseudo = torch.full_like(w_train, cfg.weight_avg)
    return w_train, w_pseudo


def generator_losses(nets, cfg, labels, w_train, w_pseudo,
                     batch_s, gt_s, batch_td, batch_tn):
    """All generator loss terms for one iteration plus the softmax maps.

    The exposure target is the mean intensity of the raw (pre-relighting)
    night batch, recomputed every call and shared by all domains.
    """
    zero = torch.zeros((), dtype=batch_s.dtype)
    if cfg.relight_enabled:
        r_s = nets["relight"](batch_s)
        r_td = nets["relight"](batch_td)
        r_tn = nets["relight"](batch_tn)
    else:
        r_s, r_td, r_tn = batch_s, batch_td, batch_tn

    l_tv = l_exp = l_ssim = zero
    if cfg.relight_enabled and cfg.light_loss_enabled:
        level = batch_tn.mean()
        pairs = [(batch_s, r_s), (batch_td, r_td), (batch_tn, r_tn)]
        if cfg.light_domains == "targets":
            pairs = pairs[1:]
        alphas = (cfg.alpha_tv, cfg.alpha_exp, cfg.alpha_ssim)
        terms = [light_loss(i, r, level, alphas) for i, r in pairs]
        l_tv = sum(t.tv for t in terms) / len(terms)
        l_exp = sum(t.exposure for t in terms) / len(terms)
        l_ssim = sum(t.ssim for t in terms) / len(terms)

    logits_s = nets["seg"](r_s)
    p_s = F.softmax(logits_s, dim=1)
    p_td = F.softmax(nets["seg"](r_td), dim=1)
    p_tn = F.softmax(nets["seg"](r_tn), dim=1)

    l_seg = weighted_ce(logits_s, gt_s, w_train, labels.ignore_index)

    l_static = zero
    if cfg.static_loss_kind != "none":
        pseudo = make_pseudo_label(p_td, w_pseudo, labels)
        night_static = restrict_to_static(p_tn, labels.static_indices)
        if cfg.static_loss_kind == "paper":
            l_static = static_loss(night_static, pseudo, labels.static_indices,
                                   gamma=cfg.focal_gamma,
                                   ignore_index=labels.ignore_index,
                                   modulation=cfg.static_modulation)
        elif cfg.static_loss_kind == "ce":
            l_static = static_loss_ce(night_static, pseudo, labels.static_indices,
                                      ignore_index=labels.ignore_index)
        else:
            l_static = static_loss_focal(night_static, pseudo, labels.static_indices,
                                         gamma=cfg.focal_gamma,
                                         ignore_index=labels.ignore_index)

    l_adv = gen_adv_loss(nets["disc_day"](p_td), nets["disc_night"](p_tn),
                         cfg.adv_real)

    l_light = cfg.alpha_tv * l_tv + cfg.alpha_exp * l_exp + cfg.alpha_ssim * l_ssim
    total = (cfg.beta_light * l_light + cfg.beta_seg * l_seg
             + cfg.beta_static * l_static + cfg.beta_adv * l_adv)
    terms = {"tv": l_tv, "exp": l_exp, "ssim": l_ssim, "seg": l_seg,
             "static": l_static, "adv": l_adv, "light": l_light, "total": total}
    probs = {"source": p_s, "day": p_td, "night": p_tn}
    return terms, probs


def combine_total(cfg, tv, exp, ssim, seg, static, adv):
    """Recombine logged components into the total objective (float64)."""
    light = cfg.alpha_tv * tv + cfg.alpha_exp * exp + cfg.alpha_ssim * ssim
    return (cfg.beta_light * light + cfg.beta_seg * seg
            + cfg.beta_static * static + cfg.beta_adv * adv)


def generator_step(state: TrainState, batch_s, gt_s, batch_td, batch_tn):
    """One SGD step on the generator with frozen discriminators.

    Returns (loss breakdown floats, detached softmax maps for the
    discriminator step). Degenerate batches raise DegenerateInputError
    before any parameter is touched.
    """
    cfg = state.cfg
    for name in ("disc_day", "disc_night"):
        for p in state.nets[name].parameters():
            p.requires_grad_(False)
    try:
        state.optimizers["gen"].zero_grad(set_to_none=True)
        w_train, w_pseudo = _train_weight_vectors(state)
        terms, probs = generator_losses(
            state.nets, cfg, state.labels, w_train, w_pseudo,
            batch_s, gt_s, batch_td, batch_tn)
        terms["total"].backward()
        state.optimizers["gen"].step()
    finally:
        for name in ("disc_day", "disc_night"):
            for p in state.nets[name].parameters():
                p.requires_grad_(True)
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    breakdown["total"] = combine_total(
        cfg, breakdown["tv"], breakdown["exp"], breakdown["ssim"],
        breakdown["seg"], breakdown["static"], breakdown["adv"])
    return breakdown, {k: v.detach() for k, v in probs.items()}


def discriminator_step(state: TrainState, p_s, p_td, p_tn):
    """One Adam step on each discriminator over detached prediction maps."""
    cfg = state.cfg
    b = p_s.shape[0]
    out = {}
    for key, disc_name, target in (("d_d", "disc_day", p_td),
                                   ("d_n", "disc_night", p_tn)):
        opt = state.optimizers[disc_name]
        opt.zero_grad(set_to_none=True)
        scores = state.nets[disc_name](torch.cat([p_s.detach(), target.detach()], dim=0))
        loss = disc_loss(scores[:b], scores[b:], cfg.adv_real, cfg.adv_fake)
        loss.backward()
        opt.step()
        out[key] = float(loss.detach())
    return out


def _sample_labeled(state, index, cache_img, cache_lbl):
    cfg = state.cfg
    images, targets = [], []
    for _ in range(cfg.batch_size):
        rec = index.records[state.cyclers["source"].next(state.rng)]
        img, lbl, _ = augment_sample(
            cache_img(rec.image_path), cache_lbl(rec.label_path),
            cfg.crop_source, cfg.scale_source, cfg.hflip, state.rng,
            ignore_index=state.labels.ignore_index)
        images.append(img)
        targets.append(lbl)
    return torch.stack(images), torch.stack(targets)


def _sample_pairs(state, index, cache_img):
    """Day and night crops of each pair share identical augmentation geometry."""
    cfg = state.cfg
    day_images, night_images = [], []
    for _ in range(cfg.batch_size):
        pair = index.pairs[state.cyclers["pairs"].next(state.rng)]
        day, _, params = augment_sample(
            cache_img(pair.day_path), None, cfg.crop_target,
            cfg.scale_target, cfg.hflip, state.rng)
        night, _, _ = augment_sample(
            cache_img(pair.night_path), None, cfg.crop_target,
            cfg.scale_target, cfg.hflip, state.rng, params=params)
        day_images.append(day)
        night_images.append(night)
    return torch.stack(day_images), torch.stack(night_images)


def _format_row(values):
    out = []
    for v in values:
        out.append(str(v) if isinstance(v, int) else f"{v:.10g}")
    return ",".join(out) + "\n"


def _rng_payload(state):
    return {"numpy": state.rng.bit_generator.state,
            "torch": torch.get_rng_state()}


def _snapshot_payload(state, stage="train"):
    from .checkpoint import FORMAT_VERSION, labels_to_dict
    import dataclasses as _dc
    return {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "iteration": state.iteration,
        "config": _dc.asdict(state.cfg),
        "labels": labels_to_dict(state.labels),
        "raw_weights": state.raw_weights.clone(),
        "nets": {k: {n: t.clone() for n, t in net.state_dict().items()}
                 for k, net in state.nets.items()},
        "optimizers": {k: opt.state_dict() for k, opt in state.optimizers.items()},
        "rng": _rng_payload(state),
        "cyclers": {k: c.state() for k, c in state.cyclers.items()},
    }


def _save_state(state, path, stage="train"):
    return save_checkpoint(
        path, stage=stage, iteration=state.iteration, cfg=state.cfg,
        labels=state.labels, raw_weights=state.raw_weights, nets=state.nets,
        optimizers=state.optimizers, rng=_rng_payload(state),
        cyclers={k: c.state() for k, c in state.cyclers.items()})


def pretrain_source(cfg: Config, source_index: DatasetIndex, labels: LabelSet,
                    out_path=None):
    """Source-only supervised training of the segmentation net.

    No relighting, no adversarial terms; `cfg.pretrain_iters` SGD steps of
    the weighted cross entropy under the poly schedule. Returns (checkpoint
    payload, per-iteration loss history); the payload keeps the untouched
    relighting net and discriminators at their initialization.
    """
    cfg = validate_config(cfg)
    state = init_state(cfg, labels, source_weight_vector(cfg, source_index, labels))
    state.cyclers["source"] = _Cycler(len(source_index.records), state.rng)
    cache_img = _ImageCache(load_image)
    cache_lbl = _ImageCache(load_label)
    w_train, _ = _train_weight_vectors(state)
    seg = state.nets["seg"]
    seg.train()
    opt = state.optimizers["gen"]
    history = []
    for it in range(cfg.pretrain_iters):
        lr = poly_lr(cfg.base_lr, it, max(cfg.pretrain_iters, 1), cfg.poly_power)
        for group in opt.param_groups:
            group["lr"] = lr
        images, targets = _sample_labeled(state, source_index, cache_img, cache_lbl)
        opt.zero_grad(set_to_none=True)
        loss = weighted_ce(seg(images), targets, w_train, labels.ignore_index)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if (it + 1) % 100 == 0 or it + 1 == cfg.pretrain_iters:
            log.info("pretrain %d/%d  l_seg %.4f", it + 1, cfg.pretrain_iters, history[-1])
    payload = _snapshot_payload(state, stage="pretrain")
    if out_path is not None:
        _save_state(state, out_path, stage="pretrain")
    return payload, history


def run_training(cfg: Config, source_index: DatasetIndex,
                 paired_index: DatasetIndex, out_dir, labels: LabelSet,
                 pretrained=None, resume=None, night_val_index=None):
    """The full alternating optimization; returns the final checkpoint path.

    Per iteration: sample one batch per domain, one generator step, one
    step of each discriminator, one CSV row appended to
    ``out_dir/loss_log.csv``. Fully deterministic for a fixed seed on a
    fixed device. `pretrained` initializes nets from a checkpoint;
    `resume` restores an interrupted run bit-exactly (config, RNG and
    optimizer state come from the resumed checkpoint).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.csv"

    if resume is not None:
        payload = load_checkpoint(resume)
        if payload.get("stage") != "train":
            raise ValueError(f"cannot resume from a {payload.get('stage')!r} checkpoint")
        from .checkpoint import config_from_checkpoint, labels_from_dict
        cfg = config_from_checkpoint(payload)
        labels = labels_from_dict(payload["labels"])
        state = init_state(cfg, labels, payload["raw_weights"])
        for name, net in state.nets.items():
            net.load_state_dict(payload["nets"][name])
        for name, opt in state.optimizers.items():
            opt.load_state_dict(payload["optimizers"][name])
        state.iteration = payload["iteration"]
        state.rng = np.random.default_rng()
        state.rng.bit_generator.state = payload["rng"]["numpy"]
        torch.set_rng_state(payload["rng"]["torch"])
        state.cyclers = {k: _Cycler.restore(v) for k, v in payload["cyclers"].items()}
        if not log_path.exists():
            log_path.write_text(",".join(LOSS_COLUMNS) + "\n")
        log.info("resumed at iteration %d from %s", state.iteration, resume)
    else:
        cfg = validate_config(cfg)
        state = init_state(cfg, labels, source_weight_vector(cfg, source_index, labels))
        if pretrained is not None:
            payload = pretrained if isinstance(pretrained, dict) else load_checkpoint(pretrained)
            for name, net in state.nets.items():
                net.load_state_dict(payload["nets"][name])
            log.info("initialized networks from pretrained checkpoint")
        state.cyclers = {"source": _Cycler(len(source_index.records), state.rng),
                         "pairs": _Cycler(len(paired_index.pairs), state.rng)}
        log_path.write_text(",".join(LOSS_COLUMNS) + "\n")

    cfg = state.cfg
    cache_img = _ImageCache(load_image)
    cache_lbl = _ImageCache(load_label)
    for net in state.nets.values():
        net.train()

    with log_path.open("a") as log_file:
        while state.iteration < cfg.max_iters:
            it = state.iteration
            lr = poly_lr(cfg.base_lr, it, cfg.max_iters, cfg.poly_power)
            lr_d = poly_lr(cfg.disc_lr, it, cfg.max_iters, cfg.poly_power)
            for group in state.optimizers["gen"].param_groups:
                group["lr"] = lr
            for name in ("disc_day", "disc_night"):
                for group in state.optimizers[name].param_groups:
                    group["lr"] = lr_d

            batch_s, gt_s = _sample_labeled(state, source_index, cache_img, cache_lbl)
            batch_td, batch_tn = _sample_pairs(state, paired_index, cache_img)
            try:
                breakdown, probs = generator_step(state, batch_s, gt_s,
                                                  batch_td, batch_tn)
            except DegenerateInputError as exc:
                log.warning("iteration %d skipped (%s)", it + 1, exc)
                state.iteration = it + 1
                continue
            d_losses = discriminator_step(state, probs["source"], probs["day"],
                                          probs["night"])
            state.iteration = it + 1
            log_file.write(_format_row((
                state.iteration, lr, breakdown["tv"], breakdown["exp"],
                breakdown["ssim"], breakdown["seg"], breakdown["static"],
                breakdown["adv"], breakdown["total"],
                d_losses["d_d"], d_losses["d_n"])))
            log_file.flush()

            if (it + 1) % 200 == 0 or it + 1 == cfg.max_iters:
                log.info("iter %d/%d  total %.4f  seg %.4f  static %.4f",
                         it + 1, cfg.max_iters, breakdown["total"],
                         breakdown["seg"], breakdown["static"])
            if cfg.save_interval and state.iteration % cfg.save_interval == 0 \
                    and state.iteration < cfg.max_iters:
                snap = out_dir / f"checkpoint_{state.iteration:06d}.pt"
                _save_state(state, snap)
                if night_val_index is not None:
                    _log_validation(state, night_val_index, out_dir)

    final_path = out_dir / "checkpoint_final.pt"
    _save_state(state, final_path)
    if night_val_index is not None:
        _log_validation(state, night_val_index, out_dir)
    for net in state.nets.values():
        net.train()
    return final_path


def _log_validation(state, val_index, out_dir):
    from .evaluation import evaluate_dataset
    report = evaluate_dataset(_snapshot_payload(state), val_index,
                              std_test=state.cfg.std_test)
    log.info("validation at iter %d: mIoU %.4f", state.iteration, report["miou"])
    val_path = Path(out_dir) / "val_log.csv"
    if not val_path.exists():
        val_path.write_text("iter,miou\n")
    with val_path.open("a") as fh:
        fh.write(f"{state.iteration},{report['miou']:.10g}\n")
    return report

"""Fine-tuning loops, model evaluation, and arm-vs-arm comparison reports."""

from __future__ import annotations

import copy
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .data import DatasetManifest, Sample, philox
from .geometry import BBox, PerturbSpec, mask_to_bbox, perturb_bbox
from .losses import batch_training_loss
from .metrics import LOWER_IS_BETTER, METRIC_NAMES, MetricReport, dsc, evaluate_dataset, fmt
from .model import EmbeddingCache, PromptSegModel, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("cotrain", "single:organ", "single:lesion")
CHECKPOINT_NAME = "checkpoint.bin"


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "cotrain"
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    organ_radius: int = 5
    lesion_radius: int = 2
    freeze_encoder: bool = True
    freeze_prompt_encoder: bool = False
    freeze_decoder: bool = False
    eval_every: int = 1
    checkpoint_dir: str | None = None
    embedding_cache: bool = True

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("Adam betas must lie in [0, 1) and eps must be > 0")
        if self.organ_radius < 0 or self.lesion_radius < 0:
            raise ValueError("perturbation radii must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.freeze_encoder and self.freeze_prompt_encoder and self.freeze_decoder:
            raise ValueError("every parameter group is frozen; nothing to train")
        return self

    @property
    def roles(self) -> tuple[str, ...]:
        return ("organ", "lesion") if self.mode == "cotrain" else (self.mode.split(":", 1)[1],)

    @property
    def loss_mode(self) -> str:
        return "cotrain_max" if self.mode == "cotrain" else "single"

    @property
    def perturb(self) -> PerturbSpec:
        return PerturbSpec({"organ": self.organ_radius, "lesion": self.lesion_radius})


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dsc: dict[str, float]


@dataclass
class TrainRecord:
    roles: tuple[str, ...]
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    initial_train_loss: float = math.nan
    final_train_loss: float = math.nan
    skipped_samples: int = 0
    wall_time: float = field(default=0.0, compare=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_dsc_organ,val_dsc_lesion\n")
        for e in self.epochs:
            buf.write(f"{e.epoch},{fmt(e.train_loss)},{fmt(e.val_dsc.get('organ', math.nan))},"
                      f"{fmt(e.val_dsc.get('lesion', math.nan))}\n")
        return buf.getvalue()


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, case_ids: Sequence[str]):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} (cases: {', '.join(case_ids)})")
        self.epoch, self.batch, self.case_ids = epoch, batch, list(case_ids)


# --------------------------------------------------------------------------
# forward helpers

def _embedder(model: PromptSegModel, use_cache: bool, cache_dir: str | Path | None) -> Callable:
    if use_cache:
        cache = EmbeddingCache(model, cache_dir)
        return cache.get
    return model.encode_image


def _decode_batch(model: PromptSegModel, embed: Callable, samples: Sequence[Sample],
                  boxes: Sequence[Sequence[BBox]]) -> list[torch.Tensor]:
    """Decode every prompt of every sample in one call; returns per-sample ``(N_i, H, W)`` logits."""
    embs, counts = [], []
    for s, bx in zip(samples, boxes):
        e = embed(s.image)
        embs.append(e.expand(len(bx), *e.shape))
        counts.append(len(bx))
    flat = [b for bx in boxes for b in bx]
    logits = model.decode_masks(torch.cat(embs), model.encode_prompts(flat))
    return list(torch.split(logits, counts))


def _gt_boxes(sample: Sample, roles: Sequence[str]) -> list[BBox]:
    return [mask_to_bbox(sample.masks[r]) for r in roles]


def _usable(sample: Sample, roles: Sequence[str]) -> bool:
    return all(r in sample.masks and sample.masks[r].any() for r in roles)


def dataset_loss(model: PromptSegModel, samples: Sequence[Sample], roles: Sequence[str], loss_mode: str,
                 embed: Callable | None = None, chunk: int = 32) -> float:
    """Mean training objective over ``samples`` with unperturbed boxes."""
    embed = embed or model.encode_image
    samples = [s for s in samples if _usable(s, roles)]
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            part = samples[i:i + chunk]
            logits = _decode_batch(model, embed, part, [_gt_boxes(s, roles) for s in part])
            targets = [[s.masks[r] for r in roles] for s in part]
            total += float(batch_training_loss(logits, targets, loss_mode)) * len(part)
    return total / len(samples)


def predict_masks(model: PromptSegModel, samples: Sequence[Sample], roles: Sequence[str],
                  embed: Callable | None = None, chunk: int = 32) -> list[tuple[str, str, np.ndarray]]:
    """Unperturbed ground-truth boxes in, ``(case_id, role, mask)`` out, thresholded at logit 0."""
    embed = embed or model.encode_image
    out = []
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            part = samples[i:i + chunk]
            logits = _decode_batch(model, embed, part, [_gt_boxes(s, roles) for s in part])
            for s, lg in zip(part, logits):
                masks = (lg > 0).to(torch.uint8).numpy()
                out.extend((s.case_id, r, masks[j]) for j, r in enumerate(roles))
    return out


def _val_dsc(model: PromptSegModel, samples: Sequence[Sample], roles: Sequence[str],
             embed: Callable) -> dict[str, float]:
    preds = predict_masks(model, samples, roles, embed)
    by_id = {s.case_id: s for s in samples}
    return {r: float(np.mean([dsc(m, by_id[cid].masks[r]) for cid, role, m in preds if role == r])) for r in roles}


# --------------------------------------------------------------------------
# training

def train(model: PromptSegModel, train_cfg: TrainConfig, samples: Sequence[Sample],
          manifest: DatasetManifest, step_hook: Callable | None = None) -> tuple[PromptSegModel, TrainRecord]:
    """Fine-tune a copy of ``model``; returns the best-validation copy and its record.

    ``step_hook(epoch, batch, logits, targets)`` runs after each backward pass;
    the per-sample logits then carry ``.grad`` for inspection.
    """
    cfg = train_cfg.validate()
    start = time.perf_counter()
    roles = cfg.roles
    by_id = {s.case_id: s for s in samples}
    missing = [cid for cid, _ in manifest.entries if cid not in by_id]
    if missing:
        raise ValueError(f"{len(missing)} manifest cases have no sample, e.g. {missing[0]}")
    train_set = [by_id[c] for c in manifest.ids("train") if _usable(by_id[c], roles)]
    val_set = [by_id[c] for c in manifest.ids("val") if _usable(by_id[c], roles)]
    skipped = len(manifest.ids("train")) - len(train_set)
    if not train_set:
        raise ValueError("train split is empty")
    if skipped:
        log.warning("skipping %d train samples with an empty mask for roles %s", skipped, roles)

    model = copy.deepcopy(model)
    model.set_trainable(encoder=not cfg.freeze_encoder, prompt_encoder=not cfg.freeze_prompt_encoder,
                        decoder=not cfg.freeze_decoder)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    use_cache = cfg.embedding_cache and cfg.freeze_encoder
    embed = _embedder(model, use_cache, ckpt_dir / "embeddings" if ckpt_dir and use_cache else None)
    eval_embed = embed if use_cache else model.encode_image

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    rng = philox(cfg.seed, 0x7EA1)
    perturb = cfg.perturb
    bounds = (model.config.image_size, model.config.image_size)

    record = TrainRecord(roles=roles, skipped_samples=skipped)
    record.initial_train_loss = dataset_loss(model, train_set, roles, cfg.loss_mode, eval_embed)
    best_score, best_state = -math.inf, None

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_set[i] for i in order[lo:lo + cfg.batch_size]]
            boxes = [[perturb_bbox(mask_to_bbox(s.masks[r]), perturb.radius(r), bounds, rng) for r in roles]
                     for s in batch]
            logits = _decode_batch(model, embed, batch, boxes)
            targets = [[s.masks[r] for r in roles] for s in batch]
            if step_hook is not None:
                for lg in logits:
                    lg.retain_grad()
            loss = batch_training_loss(logits, targets, cfg.loss_mode)
            if not torch.isfinite(loss):
                err = TrainingDivergedError(epoch, b, [s.case_id for s in batch])
                if ckpt_dir is not None:
                    ckpt_dir.mkdir(parents=True, exist_ok=True)
                    cases = " ".join(err.case_ids)
                    (ckpt_dir / "nan_batch.txt").write_text(f"epoch={epoch}\nbatch={b}\ncases={cases}\n")
                raise err
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if step_hook is not None:
                step_hook(epoch, b, logits, targets)
            opt.step()
            loss_sum += loss.item() * len(batch)
        val: dict[str, float] = {}
        if val_set and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            val = _val_dsc(model, val_set, roles, eval_embed)
            score = float(np.mean(list(val.values())))
            if score > best_score:
                best_score, best_state, record.best_epoch = score, copy.deepcopy(model.state_dict()), epoch
        record.epochs.append(EpochRecord(epoch, loss_sum / len(train_set), val))
        log.info("epoch %d loss %.4f val %s", epoch, loss_sum / len(train_set), val)

    if best_state is None:
        record.best_epoch = cfg.epochs - 1
    else:
        model.load_state_dict(best_state)
    record.final_train_loss = dataset_loss(model, train_set, roles, cfg.loss_mode, eval_embed)
    record.wall_time = time.perf_counter() - start
    model.set_trainable()
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, ckpt_dir / CHECKPOINT_NAME)
    return model, record


def evaluate_model(model: PromptSegModel, samples: Sequence[Sample], roles: Sequence[str] = ("organ", "lesion"),
                   tau: float = 1.0, embed: Callable | None = None) -> MetricReport:
    """Prompt each structure with its exact ground-truth box and score the thresholded masks."""
    if not samples:
        raise ValueError("evaluation split is empty")
    usable = [s for s in samples if _usable(s, roles)]
    if not usable:
        raise ValueError(f"no samples carry non-empty masks for roles {tuple(roles)}")
    preds = predict_masks(model, usable, roles, embed)
    refs = [(s.case_id, r, s.masks[r]) for s in usable for r in roles]
    return evaluate_dataset(preds, refs, tau)


# --------------------------------------------------------------------------
# comparison

def relative_improvement(baseline: float, new: float, lower_is_better: bool = False) -> float:
    """Percent improvement of ``new`` over ``baseline``."""
    if not baseline > 0:
        raise ValueError(f"baseline must be > 0, got {baseline}")
    delta = baseline - new if lower_is_better else new - baseline
    return 100.0 * delta / baseline


@dataclass
class Comparison:
    arms: list[str]
    roles: list[str]
    means: dict[tuple[str, str, str], float]
    stds: dict[tuple[str, str, str], float]
    improvements: dict[tuple[str, str, str, str], float]

    def to_csv(self) -> str:
        """Long format: ``kind,arm,reference_arm,role,metric,value``."""
        buf = io.StringIO()
        buf.write("kind,arm,reference_arm,role,metric,value\n")
        for (arm, role, metric), v in sorted(self.means.items()):
            buf.write(f"mean,{arm},,{role},{metric},{fmt(v)}\n")
        for (arm, role, metric), v in sorted(self.stds.items()):
            buf.write(f"std,{arm},,{role},{metric},{fmt(v)}\n")
        for (ref, arm, role, metric), v in sorted(self.improvements.items()):
            buf.write(f"rel_improvement_pct,{arm},{ref},{role},{metric},{fmt(v)}\n")
        return buf.getvalue()

    def to_svg(self, metrics: Sequence[str] = ("iou", "dsc", "nsd")) -> str:
        """Grouped bar chart of per-role means for the fraction-valued metrics."""
        palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"]
        bar_w, gap, plot_h, top, left = 14, 10, 120, 30, 40
        group_w = len(self.arms) * bar_w + gap
        panel_w = len(self.roles) * group_w + gap
        width = left + len(metrics) * (panel_w + 20) + 120
        height = top + plot_h + 40
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
               f'viewBox="0 0 {width} {height}">']
        for pi, metric in enumerate(metrics):
            x0 = left + pi * (panel_w + 20)
            out.append(f'<text x="{x0 + panel_w / 2:.1f}" y="18" text-anchor="middle" font-size="12">{metric}</text>')
            out.append(f'<line x1="{x0}" y1="{top + plot_h}" x2="{x0 + panel_w}" y2="{top + plot_h}" stroke="black"/>')
            for ri, role in enumerate(self.roles):
                gx = x0 + gap + ri * group_w
                for ai, arm in enumerate(self.arms):
                    v = self.means.get((arm, role, metric), math.nan)
                    if math.isnan(v):
                        continue
                    h = max(0.0, min(1.0, v)) * plot_h
                    out.append(f'<rect x="{gx + ai * bar_w}" y="{top + plot_h - h:.2f}" width="{bar_w - 2}" '
                               f'height="{h:.2f}" fill="{palette[ai % len(palette)]}"><title>{arm} {role} '
                               f'{metric}={v:.4f}</title></rect>')
                out.append(f'<text x="{gx + len(self.arms) * bar_w / 2:.1f}" y="{top + plot_h + 14}" '
                           f'text-anchor="middle" font-size="10">{role}</text>')
        lx = left + len(metrics) * (panel_w + 20)
        for ai, arm in enumerate(self.arms):
            y = top + ai * 16
            out.append(f'<rect x="{lx}" y="{y}" width="10" height="10" fill="{palette[ai % len(palette)]}"/>')
            out.append(f'<text x="{lx + 14}" y="{y + 9}" font-size="10">{arm}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_bytes(self.to_csv().encode("utf-8"))
        (out / "comparison.svg").write_bytes(self.to_svg().encode("utf-8"))


def compare_models(arm_reports: Mapping[str, MetricReport]) -> Comparison:
    """Table of per-arm, per-role metric means plus pairwise relative improvements."""
    if not arm_reports:
        raise ValueError("no reports to compare")
    arms = sorted(arm_reports)
    roles = sorted({r for rep in arm_reports.values() for r in rep.roles})
    for role in roles:
        keysets = {arm: set(rep.keys(role)) for arm, rep in arm_reports.items() if role in rep.roles}
        first = next(iter(keysets.values()))
        for arm, ks in keysets.items():
            if ks != first:
                raise ValueError(f"report {arm!r} covers different cases for role {role!r}")
    means, stds, imps = {}, {}, {}
    for arm in arms:
        rep = arm_reports[arm]
        for role in rep.roles:
            for m in METRIC_NAMES:
                means[(arm, role, m)], stds[(arm, role, m)] = rep.aggregates[role][m]
    for ref in arms:
        for arm in arms:
            if arm == ref:
                continue
            for role in roles:
                for m in METRIC_NAMES:
                    base, new = means.get((ref, role, m)), means.get((arm, role, m))
                    if base is None or new is None:
                        continue
                    ok = base > 0 and not math.isnan(new)
                    imps[(ref, arm, role, m)] = relative_improvement(base, new, LOWER_IS_BETTER[m]) if ok else math.nan
    return Comparison(arms, roles, means, stds, imps)


def train_config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]

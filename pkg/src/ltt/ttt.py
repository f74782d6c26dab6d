"""Episodic test-time training: losses, confidence selection, the episode
loop, stream runner, baselines, and LoRA pre-initialization.

Each test instance gets its own rng derived from (seed, instance id), its
own adapter draw, a fresh optimizer, and a reset afterwards, so episodes
are independent and stream order cannot leak between instances.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from functools import reduce
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import ClipModel, TextFeatureTable, classify_batch, contrastive_loss
from .lora import AdaptedEncoder, LoraConfig, attach
from .optim import AdamW, Parameter
from .tensor import Tape, Tensor, backward, no_grad
from .views import make_views, normalize, sample_mask

MODES = ("zero_shot", "lora_ttt", "lora_ttt_m", "lora_ttt_a", "full_tune")
RECON_TARGETS = ("class_token", "visual_tokens")


@dataclass
class TttConfig:
    mode: str = "lora_ttt"
    lam_mem: float = 1.0
    lam_mae: float = 16.0
    cutoff: float = 0.1
    num_views: int = 64
    mask_ratio: float = 0.5
    recon_target: str = "class_token"
    steps: int = 1
    lr: float = 0.001
    wd: float = 0.2
    detach_target: bool = False
    seed: int = 0
    lora: LoraConfig = field(default_factory=LoraConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r} (expected one of {MODES})")
        if self.recon_target not in RECON_TARGETS:
            raise ValueError(f"unknown recon target {self.recon_target!r}")
        if not (0.0 < self.cutoff <= 1.0):
            raise ValueError(f"cutoff must be in (0, 1], got {self.cutoff}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lam_mem < 0 or self.lam_mae < 0:
            raise ValueError("loss weights must be >= 0")
        # single-loss variants pin the other weight to zero
        if self.mode == "lora_ttt_m":
            self.lam_mae = 0.0
        elif self.mode == "lora_ttt_a":
            self.lam_mem = 0.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["lora"] = self.lora.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TttConfig":
        obj = dict(obj)
        lora = obj.pop("lora", None)
        cfg = cls(**obj) if lora is None else cls(lora=LoraConfig.from_json(lora), **obj)
        return cfg


@dataclass
class PredictionDistribution:
    probs: np.ndarray
    entropy: float

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "PredictionDistribution":
        return cls(probs, entropy_np(probs))


@dataclass
class Instance:
    id: str
    image: np.ndarray  # raw (3,S,S) in [0,1]
    label: int | None = None


@dataclass
class EpisodeResult:
    instance_id: str
    predicted: int
    probs: list
    label: int | None = None
    mem_loss: float | None = None
    mae_loss: float | None = None
    total_loss: float | None = None
    step_losses: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    trainable_params: int = 0
    peak_tape_nodes: int = 0
    recorded_full_views: int = 0
    recorded_masked_views: int = 0
    recorded_tokens: int = 0
    masked_pass_tokens: int = 0
    wall_ms: float = 0.0

    @property
    def confidence(self) -> float:
        return max(self.probs)

    def jsonl_record(self) -> dict:
        # deterministic fields only; timing stays out so reruns are byte-identical
        d = asdict(self)
        d.pop("wall_ms")
        return d


def entropy_np(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    mask = p > 0
    return float(-(p[mask] * np.log(p[mask])).sum())


def select_confident(per_view_probs: np.ndarray, cutoff: float) -> list[int]:
    """Indices of the k = max(1, floor(cutoff*N)) lowest-entropy views,
    ties broken by ascending view index."""
    n = per_view_probs.shape[0]
    k = max(1, int(np.floor(cutoff * n)))
    ents = np.array([entropy_np(row) for row in per_view_probs])
    order = np.argsort(ents, kind="stable")
    return [int(i) for i in order[:k]]


def mem_loss(selected_probs: Tensor) -> Tensor:
    """Entropy of the mean distribution over the selected views."""
    if selected_probs.shape[0] < 1:
        raise ValueError("mem_loss: empty selection")
    return T.entropy(T.mean(selected_probs, axis=0))


def mae_loss(encoder, selected_views: np.ndarray, mask_ratio: float, recon_target: str,
             rng: np.random.Generator, *, unmasked_cls: Tensor | None = None,
             unmasked_tokens: Tensor | None = None, detach_target: bool = False,
             stats: dict | None = None) -> Tensor:
    """Reconstruction loss between masked and unmasked encodings.

    class_token: MSE of the projected class embeddings. visual_tokens: MSE
    over the token positions kept by the mask. One fresh mask per view.
    When the unmasked embeddings are not supplied they are computed here
    with the same adapters (gradients flow through both branches unless
    detach_target is set).
    """
    k = selected_views.shape[0]
    if k < 1:
        raise ValueError("mae_loss: empty selection")
    model = encoder.model if hasattr(encoder, "model") else encoder
    p_total = model.vit.num_patches
    if unmasked_cls is None:
        unmasked_cls, unmasked_tokens = encoder.encode_image_batch(selected_views)
        if stats is not None:
            stats["full_views"] = stats.get("full_views", 0) + k
            stats["tokens"] = stats.get("tokens", 0) + k * (1 + p_total)
    terms = []
    for j in range(k):
        spec = sample_mask(p_total, mask_ratio, rng)
        kept = np.setdiff1d(np.arange(p_total), spec.masked_indices)
        if recon_target == "visual_tokens" and kept.size == 0:
            raise ValueError("mask leaves zero unmasked patches for visual_tokens target")
        cls_m, tok_m = encoder.encode_image(selected_views[j], mask=spec.masked_indices)
        if stats is not None:
            stats["masked_views"] = stats.get("masked_views", 0) + 1
            stats["masked_tokens"] = stats.get("masked_tokens", 0) + 1 + kept.size
            stats["tokens"] = stats.get("tokens", 0) + 1 + kept.size
        if recon_target == "class_token":
            target = T.reshape(T.index_select(unmasked_cls, [j], axis=0), cls_m.shape)
        else:
            row = T.reshape(T.index_select(unmasked_tokens, [j], axis=0),
                            (p_total, tok_m.shape[-1]))
            target = T.index_select(row, kept, axis=0)
        if detach_target:
            target = target.detach()
        terms.append(T.mse(cls_m, target) if recon_target == "class_token"
                     else T.mse(tok_m, target))
    return T.mul(reduce(T.add, terms), 1.0 / k)


def total_loss(l_mem, l_mae, lam1: float, lam2: float):
    """lam1 * L_MEM + lam2 * L_MAE, on tensors or plain floats."""
    if isinstance(l_mem, Tensor) or isinstance(l_mae, Tensor):
        return T.add(T.mul(l_mem, float(lam1)), T.mul(l_mae, float(lam2)))
    return lam1 * l_mem + lam2 * l_mae


class FullTuneEncoder:
    """Image Encoder Tuning baseline: the last two layers' attention
    projections (weights and biases) are trained directly; reset restores
    the snapshot so the base model is untouched across episodes."""

    def __init__(self, model: ClipModel):
        self.model = model
        n = model.vit.num_layers
        self.names = [f"img.layers.{i}.attn.{t}"
                      for i in (n - 2, n - 1)
                      for t in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
        self.snapshot = {name: model.params[name].data.copy() for name in self.names}
        for name in self.names:
            model.params[name].set_trainable(True)

    def encode_image_batch(self, images):
        return self.model.encode_image_batch(images)

    def encode_image(self, image, mask=None):
        return self.model.encode_image(image, mask=mask)

    def trainable_params(self) -> list[Parameter]:
        return [self.model.params[name] for name in self.names]

    def trainable_count(self) -> int:
        return sum(p.data.size for p in self.trainable_params())

    def reset(self, rng=None):
        for name in self.names:
            p = self.model.params[name]
            p.value.data = self.snapshot[name].copy()
            p.zero_grad()

    def finish(self):
        self.reset()
        for name in self.names:
            self.model.params[name].set_trainable(False)


class ZeroShotEncoder:
    def __init__(self, model: ClipModel):
        self.model = model

    def encode_image_batch(self, images):
        return self.model.encode_image_batch(images)

    def encode_image(self, image, mask=None):
        return self.model.encode_image(image, mask=mask)

    def trainable_params(self) -> list[Parameter]:
        return []

    def trainable_count(self) -> int:
        return 0

    def reset(self, rng=None):
        pass


def build_encoder_for_mode(model: ClipModel, cfg: TttConfig):
    if cfg.mode == "zero_shot":
        return ZeroShotEncoder(model)
    if cfg.mode == "full_tune":
        return FullTuneEncoder(model)
    return attach(model, cfg.lora, np.random.default_rng(cfg.seed))


def episode_rng(seed: int, instance_id: str) -> np.random.Generator:
    digest = hashlib.blake2b(instance_id.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest, "big")]))


def _classify_view0(encoder, view0: np.ndarray, table: TextFeatureTable, tau: float):
    with no_grad():
        cls, _ = encoder.encode_image_batch(view0[None])
        probs = classify_batch(cls, table, tau)
    return probs.data[0]


def run_episode(instance: Instance, encoder, table: TextFeatureTable,
                cfg: TttConfig, rng: np.random.Generator) -> EpisodeResult:
    """One adapt-predict-reset episode on a single test instance."""
    t0 = time.perf_counter()
    model = encoder.model if hasattr(encoder, "model") else encoder
    tau = model.tau
    size = model.vit.image_size
    p_total = model.vit.num_patches

    if cfg.mode == "zero_shot":
        view0 = normalize(instance.image.astype(np.float32), model.norm_mean, model.norm_std)
        probs = _classify_view0(encoder, view0, table, tau)
        return EpisodeResult(
            instance_id=instance.id, predicted=int(np.argmax(probs)),
            probs=[float(x) for x in probs], label=instance.label,
            wall_ms=(time.perf_counter() - t0) * 1000.0)

    encoder.reset(rng)  # per-episode seeding: adapter state from this instance's stream
    batch = make_views(instance.image, cfg.num_views, rng, model.norm_mean,
                       model.norm_std, size)
    opt = AdamW(lr=cfg.lr, wd=cfg.wd)
    trainables = encoder.trainable_params()

    peak_nodes = 0
    stats: dict = {}
    step_losses: list = []
    selected: list[int] = []
    for _ in range(cfg.steps):
        for p in trainables:
            p.zero_grad()
        if cfg.mode == "lora_ttt_a":
            # selection pass carries no gradients; only selected views are re-encoded
            with no_grad():
                cls_all, tok_all = encoder.encode_image_batch(batch.views)
                probs_all = classify_batch(cls_all, table, tau).data
            selected = select_confident(probs_all, cfg.cutoff)
            sel_views = batch.views[selected]
            with Tape() as tape:
                if cfg.detach_target:
                    unm_cls: Tensor | None = Tensor(cls_all.data[selected])
                    unm_tok = (Tensor(tok_all.data[selected])
                               if cfg.recon_target == "visual_tokens" else None)
                else:
                    unm_cls, unm_tok = encoder.encode_image_batch(sel_views)
                    stats["full_views"] = stats.get("full_views", 0) + len(selected)
                    stats["tokens"] = stats.get("tokens", 0) + len(selected) * (1 + p_total)
                l_mae = mae_loss(encoder, sel_views, cfg.mask_ratio, cfg.recon_target,
                                 rng, unmasked_cls=unm_cls, unmasked_tokens=unm_tok,
                                 stats=stats)
                l_mem_val = None
                loss = total_loss(Tensor(np.zeros((), dtype=l_mae.dtype)), l_mae,
                                  cfg.lam_mem, cfg.lam_mae)
                backward(loss)
            l_mae_val = float(l_mae.data)
            total_val = float(loss.data)
        else:
            with Tape() as tape:
                cls_all, tok_all = encoder.encode_image_batch(batch.views)
                stats["full_views"] = stats.get("full_views", 0) + cfg.num_views
                stats["tokens"] = stats.get("tokens", 0) + cfg.num_views * (1 + p_total)
                probs_t = classify_batch(cls_all, table, tau)
                selected = select_confident(probs_t.data, cfg.cutoff)
                sel_probs = T.index_select(probs_t, selected, axis=0)
                l_mem = mem_loss(sel_probs)
                l_mem_val = float(l_mem.data)
                if cfg.lam_mae > 0:
                    unm_cls = T.index_select(cls_all, selected, axis=0)
                    unm_tok = (T.index_select(tok_all, selected, axis=0)
                               if cfg.recon_target == "visual_tokens" else None)
                    l_mae = mae_loss(encoder, batch.views[selected], cfg.mask_ratio,
                                     cfg.recon_target, rng, unmasked_cls=unm_cls,
                                     unmasked_tokens=unm_tok,
                                     detach_target=cfg.detach_target, stats=stats)
                    l_mae_val = float(l_mae.data)
                else:
                    l_mae = Tensor(np.zeros((), dtype=l_mem.dtype))
                    l_mae_val = None
                loss = total_loss(l_mem, l_mae, cfg.lam_mem, cfg.lam_mae)
                backward(loss)
            total_val = float(loss.data)
        peak_nodes = max(peak_nodes, tape.num_nodes)
        step_losses.append([l_mem_val, l_mae_val, total_val])
        opt.step(trainables)

    view0 = batch.views[0]
    probs = _classify_view0(encoder, view0, table, tau)
    result = EpisodeResult(
        instance_id=instance.id, predicted=int(np.argmax(probs)),
        probs=[float(x) for x in probs], label=instance.label,
        mem_loss=step_losses[-1][0], mae_loss=step_losses[-1][1],
        total_loss=step_losses[-1][2], step_losses=step_losses,
        selected=list(selected), trainable_params=encoder.trainable_count(),
        peak_tape_nodes=peak_nodes,
        recorded_full_views=stats.get("full_views", 0),
        recorded_masked_views=stats.get("masked_views", 0),
        recorded_tokens=stats.get("tokens", 0),
        masked_pass_tokens=stats.get("masked_tokens", 0))
    encoder.reset(rng)  # episodic contract: nothing survives the instance
    result.wall_ms = (time.perf_counter() - t0) * 1000.0
    return result


@dataclass
class RunReport:
    mode: str
    dataset: str
    seed: int
    episodes: list
    top1: float
    ece: float
    mean_mem_loss: float | None
    mean_mae_loss: float | None
    trainable_params: int
    median_episode_ms: float
    reset_events: int

    def report_json(self) -> dict:
        return {
            "mode": self.mode, "dataset": self.dataset, "seed": self.seed,
            "top1": self.top1, "ece": self.ece,
            "mean_mem_loss": self.mean_mem_loss, "mean_mae_loss": self.mean_mae_loss,
            "trainable_params": self.trainable_params,
            "median_episode_ms": self.median_episode_ms,
            "num_instances": len(self.episodes), "reset_events": self.reset_events,
        }

    def write_outputs(self, outdir):
        from .metrics import report_csv_rows
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as f:
            json.dump(self.report_json(), f, indent=2)
            f.write("\n")
        with open(out / "report.csv", "w") as f:
            f.write(report_csv_rows([self.report_json()]))
        with open(out / "episodes.jsonl", "w") as f:
            for ep in self.episodes:
                f.write(json.dumps(ep.jsonl_record()) + "\n")


def run_stream(items: list[Instance], model: ClipModel, table: TextFeatureTable,
               cfg: TttConfig, dataset_name: str = "test",
               adapters_path=None) -> RunReport:
    """Episodes over a split, each seeded by (seed, instance id)."""
    from .metrics import ece as ece_metric, top1_accuracy
    if not items:
        raise ValueError("empty dataset split")
    encoder = build_encoder_for_mode(model, cfg)
    if adapters_path is not None:
        if not isinstance(encoder, AdaptedEncoder):
            raise ValueError("adapter checkpoint requires a lora mode")
        encoder.load_adapters(adapters_path)
    resets = 0
    episodes: list[EpisodeResult] = []
    try:
        for item in items:
            rng = episode_rng(cfg.seed, item.id)
            episodes.append(run_episode(item, encoder, table, cfg, rng))
            if cfg.mode != "zero_shot":
                resets += 1
    finally:
        if isinstance(encoder, FullTuneEncoder):
            encoder.finish()

    labeled = [(ep.predicted, ep.label) for ep in episodes if ep.label is not None]
    top1 = top1_accuracy([p for p, _ in labeled], [l for _, l in labeled]) if labeled else 0.0
    confs = [ep.confidence for ep in episodes if ep.label is not None]
    correct = [ep.predicted == ep.label for ep in episodes if ep.label is not None]
    ece_val = ece_metric(confs, correct).ece if confs else 0.0
    mem_vals = [ep.mem_loss for ep in episodes if ep.mem_loss is not None]
    mae_vals = [ep.mae_loss for ep in episodes if ep.mae_loss is not None]
    return RunReport(
        mode=cfg.mode, dataset=dataset_name, seed=cfg.seed, episodes=episodes,
        top1=top1, ece=ece_val,
        mean_mem_loss=float(np.mean(mem_vals)) if mem_vals else None,
        mean_mae_loss=float(np.mean(mae_vals)) if mae_vals else None,
        trainable_params=episodes[0].trainable_params if episodes else 0,
        median_episode_ms=float(np.median([ep.wall_ms for ep in episodes])),
        reset_events=resets)


def lora_pretrain(model: ClipModel, pairs: list[tuple[np.ndarray, str]], epochs: int,
                  rng: np.random.Generator, lora_cfg: LoraConfig | None = None,
                  lr: float = 1e-4, wd: float = 0.05,
                  batch_size: int = 64) -> tuple[AdaptedEncoder, list[float]]:
    """Contrastive pre-initialization of the adapter weights only.

    The base stays frozen; text features are precomputed since no text
    parameter trains. Returns the adapted encoder (baseline installed)
    and the per-batch loss trace.
    """
    if not pairs:
        raise ValueError("empty image-text pair set")
    encoder = attach(model, lora_cfg or LoraConfig(), rng)
    scale = 1.0 / model.tau
    with no_grad():
        caption_feats = {}
        for _, caption in pairs:
            if caption not in caption_feats:
                emb = model.encode_text(model.vocab.encode(caption))
                caption_feats[caption] = T.l2_normalize(emb, axis=-1).data

    images = np.stack([normalize(img, model.norm_mean, model.norm_std)
                       for img, _ in pairs])
    text_rows = np.stack([caption_feats[c] for _, c in pairs])
    opt = AdamW(lr=lr, wd=wd)
    losses: list[float] = []
    n = len(pairs)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if idx.size < 2:
                continue
            for p in encoder.trainable_params():
                p.zero_grad()
            with Tape():
                cls, _ = encoder.encode_image_batch(images[idx])
                img_emb = T.l2_normalize(cls, axis=-1)
                loss = contrastive_loss(img_emb, Tensor(text_rows[idx]), scale)
                backward(loss)
            opt.step(encoder.trainable_params())
            losses.append(float(loss.data))
    encoder.set_baseline_from_current()
    return encoder, losses

"""Joint contrastive pretraining of the dual encoder on the synthetic set,
plus precomputation of the class text-feature table."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DatasetManifest, load_pairs, vocabulary_words
from .encoder import (ClipModel, TextConfig, TextFeatureTable, VitConfig, Vocab,
                      build_text_table, contrastive_loss, classify_batch)
from .optim import AdamW
from .tensor import Tape, backward, no_grad
from .views import normalize, random_resized_crop

PRETRAIN_CROP_RANGE = (0.5, 1.0)  # milder than test-time crops: shapes are localized


def _encode_captions(model: ClipModel, caption_ids: list[list[int]]):
    """Normalized embeddings for all captions, batched by shared length."""
    by_len: dict[int, list[int]] = {}
    for i, ids in enumerate(caption_ids):
        by_len.setdefault(len(ids), []).append(i)
    chunks = []
    order: list[int] = []
    for length in sorted(by_len):
        group = by_len[length]
        chunks.append(model.encode_text_batch([caption_ids[i] for i in group]))
        order.extend(group)
    stacked = T.concat(chunks, axis=0) if len(chunks) > 1 else chunks[0]
    inverse = np.argsort(order)
    return T.l2_normalize(T.index_select(stacked, inverse, axis=0), axis=-1)


def pretrain(data_dir, vit_cfg: VitConfig | None = None, epochs: int = 30,
             seed: int = 0, batch_size: int = 64, base_lr: float = 1e-3,
             wd: float = 0.1, augment: bool = True) -> tuple[ClipModel, list[float]]:
    """Train image and text encoders with the symmetric contrastive loss.

    Cosine-decayed lr; decoupled decay applies to weight matrices only.
    With `augment` the image side sees random resized crops and flips, so
    test-time crop views stay in-distribution. Returns the trained
    (frozen) model and the per-step loss trace.
    """
    root = Path(data_dir)
    manifest = DatasetManifest.load(root / "manifest.json")
    pairs = load_pairs(root, "train")
    if not pairs:
        raise ValueError("train split is empty")
    if batch_size > len(pairs):
        raise ValueError(f"batch size {batch_size} larger than dataset ({len(pairs)})")

    vit_cfg = vit_cfg or VitConfig()
    vocab = Vocab(vocabulary_words(manifest.class_names))
    txt_cfg = TextConfig(vocab_size=len(vocab), out_dim=vit_cfg.out_dim)
    model = ClipModel.create(vit_cfg, txt_cfg, vocab, seed=seed)
    mean = np.asarray(manifest.normalization["mean"], dtype=np.float32)
    std = np.asarray(manifest.normalization["std"], dtype=np.float32)
    model.set_normalization(mean, std)

    captions = sorted({c for _, c in pairs})
    caption_ids = [vocab.encode(c) for c in captions]
    cap_index = {c: i for i, c in enumerate(captions)}
    pair_caption = np.array([cap_index[c] for _, c in pairs])
    raw_images = [np.asarray(img, dtype=np.float32) for img, _ in pairs]
    plain = np.stack([normalize(img, mean, std) for img in raw_images])

    skip_decay = ("norm.mean", "norm.std")
    for name, p in model.params.items():
        if name not in skip_decay:
            p.set_trainable(True)
    decay = [p for p in model.trainable_params() if p.data.ndim >= 2]
    no_decay = [p for p in model.trainable_params() if p.data.ndim < 2]
    opt_w = AdamW(lr=base_lr, wd=wd)
    opt_b = AdamW(lr=base_lr, wd=0.0)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7261]))
    n = len(pairs)
    steps_per_epoch = max(1, n // batch_size)
    total_steps = epochs * steps_per_epoch
    losses: list[float] = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            if augment:
                batch_imgs = np.stack([
                    normalize(random_resized_crop(raw_images[i], rng,
                                                  vit_cfg.image_size,
                                                  PRETRAIN_CROP_RANGE)[0], mean, std)
                    for i in idx])
            else:
                batch_imgs = plain[idx]
            lr = base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, total_steps)))
            opt_w.lr = lr
            opt_b.lr = lr
            for p in model.trainable_params():
                p.zero_grad()
            with Tape():
                cls, _ = model.encode_image_batch(batch_imgs)
                img_emb = T.l2_normalize(cls, axis=-1)
                txt_all = _encode_captions(model, caption_ids)
                txt_emb = T.index_select(txt_all, pair_caption[idx], axis=0)
                scale = T.exp(model.params["logit_scale"].value)
                loss = contrastive_loss(img_emb, txt_emb, scale)
                backward(loss)
            opt_w.step(decay)
            opt_b.step(no_decay)
            model.clamp_logit_scale()
            losses.append(float(loss.data))
            step += 1

    for p in model.param_list():
        p.set_trainable(False)
    return model, losses


def zero_shot_accuracy(model: ClipModel, table: TextFeatureTable,
                       instances, batch_size: int = 128) -> float:
    """Direct classify-and-argmax accuracy over raw [0,1] images."""
    hits = 0
    with no_grad():
        for start in range(0, len(instances), batch_size):
            chunk = instances[start:start + batch_size]
            imgs = np.stack([normalize(inst.image, model.norm_mean, model.norm_std)
                             for inst in chunk])
            cls, _ = model.encode_image_batch(imgs)
            probs = classify_batch(cls, table, model.tau).data
            hits += sum(int(np.argmax(probs[i])) == chunk[i].label
                        for i in range(len(chunk)))
    return hits / len(instances)


def embed_text(checkpoint_path, class_names: list[str], templates: list[str],
               out_path) -> TextFeatureTable:
    """Build the ensemble text table from a checkpoint and write it as LTTC."""
    model = ClipModel.load(checkpoint_path)
    table = build_text_table(model, class_names, templates)
    table.save(out_path)
    return table

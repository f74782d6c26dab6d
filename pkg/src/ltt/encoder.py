"""Miniature CLIP-style dual encoder.

Image side: pre-norm ViT over 8x8 patches with a class token; all output
tokens are projected into the shared embedding space. Text side: a small
transformer over whitespace tokens from a closed vocabulary; the feature is
the end-of-sequence position. Cosine-similarity classification against a
precomputed table of class text embeddings, temperature-scaled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import Parameter
from .serial import read_checkpoint, read_text_table, write_checkpoint, write_text_table
from .tensor import Tensor

META_VERSION = 1
LOGIT_SCALE_INIT = math.log(100.0)  # 1/tau starts at the clamp; softer inits
LOGIT_SCALE_MAX = math.log(100.0)   # weaken the learned features at this scale


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    out_dim: int = 64
    class_token: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.num_layers < 2:
            raise ValueError("need num_layers >= 2")
        if not self.class_token:
            raise ValueError("class token is required")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size


@dataclass
class TextConfig:
    vocab_size: int
    context: int = 16
    width: int = 64
    num_layers: int = 2
    num_heads: int = 4
    out_dim: int = 64

    def __post_init__(self):
        if self.width % self.num_heads != 0:
            raise ValueError(f"width {self.width} not divisible by {self.num_heads} heads")


@dataclass
class TextFeatureTable:
    class_names: list[str]
    features: np.ndarray  # K x D_e, unit-norm rows

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ValueError("need at least 2 classes")
        if self.features.shape[0] != len(self.class_names):
            raise ValueError("row count does not match class names")
        norms = np.linalg.norm(self.features, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("table rows must be L2-normalized")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def save(self, path):
        write_text_table(path, self.class_names, self.features)

    @classmethod
    def load(cls, path) -> "TextFeatureTable":
        names, rows = read_text_table(path)
        return cls(names, rows)


class Vocab:
    """Whitespace tokenizer over a closed word list. ids 0/1 are bos/eos."""

    BOS = 0
    EOS = 1

    def __init__(self, words: list[str]):
        self.words = sorted(set(w.lower() for w in words))
        self.index = {w: i + 2 for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words) + 2

    def encode(self, text: str) -> list[int]:
        ids = [self.BOS]
        for w in text.lower().split():
            if w not in self.index:
                raise ValueError(f"unknown token {w!r}")
            ids.append(self.index[w])
        ids.append(self.EOS)
        return ids


def _init_params(vit: VitConfig, txt: TextConfig, rng: np.random.Generator, dtype) -> dict:
    def normal(shape, std=0.02):
        return rng.normal(0.0, std, size=shape).astype(dtype)

    p: dict[str, np.ndarray] = {}
    p["img.patch.w"] = normal((vit.embed_dim, vit.patch_dim))
    p["img.patch.b"] = np.zeros(vit.embed_dim, dtype=dtype)
    p["img.cls"] = normal((vit.embed_dim,))
    p["img.pos"] = normal((1 + vit.num_patches, vit.embed_dim), std=0.01)
    for i in range(vit.num_layers):
        _init_block(p, f"img.layers.{i}", vit.embed_dim, vit.mlp_ratio, rng, dtype)
    p["img.ln_f.g"] = np.ones(vit.embed_dim, dtype=dtype)
    p["img.ln_f.b"] = np.zeros(vit.embed_dim, dtype=dtype)
    p["img.proj"] = normal((vit.out_dim, vit.embed_dim))

    p["txt.tok"] = normal((txt.vocab_size, txt.width))
    p["txt.pos"] = normal((txt.context, txt.width), std=0.01)
    for i in range(txt.num_layers):
        _init_block(p, f"txt.layers.{i}", txt.width, 4.0, rng, dtype)
    p["txt.ln_f.g"] = np.ones(txt.width, dtype=dtype)
    p["txt.ln_f.b"] = np.zeros(txt.width, dtype=dtype)
    p["txt.proj"] = normal((txt.out_dim, txt.width))

    p["logit_scale"] = np.asarray(LOGIT_SCALE_INIT, dtype=dtype)
    p["norm.mean"] = np.zeros(3, dtype=dtype)
    p["norm.std"] = np.ones(3, dtype=dtype)
    return p


def _init_block(p: dict, prefix: str, d: int, mlp_ratio: float, rng, dtype):
    h = int(d * mlp_ratio)

    def normal(shape, std=0.02):
        return rng.normal(0.0, std, size=shape).astype(dtype)

    p[f"{prefix}.ln1.g"] = np.ones(d, dtype=dtype)
    p[f"{prefix}.ln1.b"] = np.zeros(d, dtype=dtype)
    for m in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.attn.{m}"] = normal((d, d))
        p[f"{prefix}.attn.{m.replace('w', 'b')}"] = np.zeros(d, dtype=dtype)
    p[f"{prefix}.ln2.g"] = np.ones(d, dtype=dtype)
    p[f"{prefix}.ln2.b"] = np.zeros(d, dtype=dtype)
    p[f"{prefix}.mlp.w1"] = normal((h, d))
    p[f"{prefix}.mlp.b1"] = np.zeros(h, dtype=dtype)
    p[f"{prefix}.mlp.w2"] = normal((d, h))
    p[f"{prefix}.mlp.b2"] = np.zeros(d, dtype=dtype)


class ClipModel:
    """Frozen-by-default dual encoder. All weights live in a flat name->Parameter map."""

    def __init__(self, vit: VitConfig, txt: TextConfig, vocab: Vocab,
                 arrays: dict[str, np.ndarray]):
        self.vit = vit
        self.txt = txt
        self.vocab = vocab
        self.params: dict[str, Parameter] = {
            name: Parameter(name, Tensor(arr)) for name, arr in arrays.items()
        }

    # -- construction / persistence -------------------------------------

    @classmethod
    def create(cls, vit: VitConfig, txt: TextConfig, vocab: Vocab,
               seed: int = 0, dtype=np.float32) -> "ClipModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1717]))
        return cls(vit, txt, vocab, _init_params(vit, txt, rng, dtype))

    def save(self, path):
        arrays = {name: p.data for name, p in self.params.items()}
        dt = self.dtype
        arrays["meta.config"] = np.asarray(
            [META_VERSION, self.vit.image_size, self.vit.patch_size, self.vit.embed_dim,
             self.vit.num_layers, self.vit.num_heads, self.vit.mlp_ratio, self.vit.out_dim,
             self.txt.context, self.txt.width, self.txt.num_layers, self.txt.num_heads],
            dtype=dt)
        vocab_blob = "\n".join(self.vocab.words).encode("utf-8")
        arrays["meta.vocab"] = np.frombuffer(vocab_blob, dtype=np.uint8).astype(dt)
        write_checkpoint(path, arrays)

    @classmethod
    def load(cls, path) -> "ClipModel":
        arrays = read_checkpoint(path)
        if "meta.config" not in arrays or "meta.vocab" not in arrays:
            raise ValueError(f"checkpoint {path} is missing meta entries")
        cfg = arrays.pop("meta.config")
        if int(cfg[0]) != META_VERSION:
            raise ValueError(f"unsupported checkpoint meta version {cfg[0]}")
        vocab_blob = arrays.pop("meta.vocab").astype(np.uint8).tobytes().decode("utf-8")
        vocab = Vocab(vocab_blob.split("\n")) if vocab_blob else Vocab([])
        vit = VitConfig(image_size=int(cfg[1]), patch_size=int(cfg[2]), embed_dim=int(cfg[3]),
                        num_layers=int(cfg[4]), num_heads=int(cfg[5]), mlp_ratio=float(cfg[6]),
                        out_dim=int(cfg[7]))
        txt = TextConfig(vocab_size=len(vocab), context=int(cfg[8]), width=int(cfg[9]),
                         num_layers=int(cfg[10]), num_heads=int(cfg[11]), out_dim=int(cfg[7]))
        return cls(vit, txt, vocab, arrays)

    # -- basic accessors --------------------------------------------------

    @property
    def dtype(self):
        return self.params["img.patch.w"].data.dtype

    @property
    def tau(self) -> float:
        # stored as ln(1/tau), CLIP convention
        return float(np.exp(-self.params["logit_scale"].data))

    @property
    def norm_mean(self) -> np.ndarray:
        return self.params["norm.mean"].data

    @property
    def norm_std(self) -> np.ndarray:
        return self.params["norm.std"].data

    def set_normalization(self, mean: np.ndarray, std: np.ndarray):
        dt = self.dtype
        self.params["norm.mean"].value.data = np.asarray(mean, dtype=dt)
        self.params["norm.std"].value.data = np.asarray(std, dtype=dt)

    def param_list(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_params(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def clamp_logit_scale(self):
        s = self.params["logit_scale"]
        s.value.data = np.minimum(s.data, np.asarray(LOGIT_SCALE_MAX, dtype=s.data.dtype))

    # -- forward ----------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name].value

    def _block(self, x: Tensor, prefix: str, num_heads: int, adapter_fn=None) -> Tensor:
        b, t, d = x.shape
        dh = d // num_heads
        h = T.layer_norm(x, self._p(f"{prefix}.ln1.g"), self._p(f"{prefix}.ln1.b"))
        heads = {}
        for m in ("wq", "wk", "wv"):
            w = T.matmul(h, T.transpose(self._p(f"{prefix}.attn.{m}"), (1, 0)))
            w = T.add(w, self._p(f"{prefix}.attn.{m.replace('w', 'b')}"))
            ad = adapter_fn(prefix, m) if adapter_fn else None
            if ad is not None:
                w = T.add(w, ad.delta(h))
            heads[m] = T.transpose(T.reshape(w, (b, t, num_heads, dh)), (0, 2, 1, 3))
        scores = T.matmul(heads["wq"], T.transpose(heads["wk"], (0, 1, 3, 2)))
        scores = T.mul(scores, 1.0 / math.sqrt(dh))
        att = T.softmax(scores, axis=-1)
        ctx = T.matmul(att, heads["wv"])
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        out = T.matmul(ctx, T.transpose(self._p(f"{prefix}.attn.wo"), (1, 0)))
        out = T.add(out, self._p(f"{prefix}.attn.bo"))
        ad = adapter_fn(prefix, "wo") if adapter_fn else None
        if ad is not None:
            out = T.add(out, ad.delta(ctx))
        x = T.add(x, out)

        h = T.layer_norm(x, self._p(f"{prefix}.ln2.g"), self._p(f"{prefix}.ln2.b"))
        h = T.add(T.matmul(h, T.transpose(self._p(f"{prefix}.mlp.w1"), (1, 0))),
                  self._p(f"{prefix}.mlp.b1"))
        h = T.gelu(h)
        h = T.add(T.matmul(h, T.transpose(self._p(f"{prefix}.mlp.w2"), (1, 0))),
                  self._p(f"{prefix}.mlp.b2"))
        return T.add(x, h)

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(B,3,H,W) -> (B, P, 3*p*p), row-major patch order."""
        p = self.vit.patch_size
        b, c, hh, ww = images.shape
        g = hh // p
        x = images.reshape(b, c, g, p, g, p)
        x = x.transpose(0, 2, 4, 1, 3, 5)
        return np.ascontiguousarray(x.reshape(b, g * g, c * p * p), dtype=self.dtype)

    def encode_image_batch(self, images, adapter_fn=None) -> tuple[Tensor, Tensor]:
        """Full (unmasked) forward of a batch. Returns (cls B x D_e, tokens B x P x D_e)."""
        imgs = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=self.dtype)
        self._check_image_shape(imgs)
        return self._forward_image(self.patchify(imgs), keep=None, adapter_fn=adapter_fn)

    def encode_image(self, image, mask=None, adapter_fn=None) -> tuple[Tensor, Tensor]:
        """Single image, optionally dropping the given patch indices.

        The class token is never dropped; positions are added before removal.
        """
        img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=self.dtype)
        self._check_image_shape(img[None])
        keep = None
        if mask is not None:
            pcount = self.vit.num_patches
            dropped = sorted(set(int(i) for i in mask))
            if dropped and (dropped[0] < 0 or dropped[-1] >= pcount):
                raise ValueError(f"mask index out of range for {pcount} patches")
            dropset = set(dropped)
            keep = [0] + [1 + j for j in range(pcount) if j not in dropset]
        cls, toks = self._forward_image(self.patchify(img[None]), keep, adapter_fn)
        return (T.reshape(cls, (self.vit.out_dim,)),
                T.reshape(toks, (toks.shape[1], self.vit.out_dim)))

    def _check_image_shape(self, imgs: np.ndarray):
        s = self.vit.image_size
        if imgs.ndim != 4 or imgs.shape[1:] != (3, s, s):
            raise ValueError(f"expected images of shape (*,3,{s},{s}), got {imgs.shape}")

    def _forward_image(self, patches: np.ndarray, keep, adapter_fn) -> tuple[Tensor, Tensor]:
        b = patches.shape[0]
        d = self.vit.embed_dim
        x = T.matmul(Tensor(patches), T.transpose(self._p("img.patch.w"), (1, 0)))
        x = T.add(x, self._p("img.patch.b"))
        cls = T.broadcast_to(T.reshape(self._p("img.cls"), (1, 1, d)), (b, 1, d))
        x = T.concat([cls, x], axis=1)
        x = T.add(x, self._p("img.pos"))
        if keep is not None:
            x = T.index_select(x, keep, axis=1)
        for i in range(self.vit.num_layers):
            x = self._block(x, f"img.layers.{i}", self.vit.num_heads, adapter_fn)
        x = T.layer_norm(x, self._p("img.ln_f.g"), self._p("img.ln_f.b"))
        x = T.matmul(x, T.transpose(self._p("img.proj"), (1, 0)))
        cls_out = T.reshape(T.slice_axis(x, 1, 0, 1), (b, self.vit.out_dim))
        tok_out = T.slice_axis(x, 1, 1, x.shape[1])
        return cls_out, tok_out

    def encode_text(self, token_ids: list[int]) -> Tensor:
        """Unnormalized D_e embedding of one token sequence (callers normalize)."""
        out = self.encode_text_batch([token_ids])
        return T.reshape(out, (self.txt.out_dim,))

    def encode_text_batch(self, sequences: list[list[int]]) -> Tensor:
        """Batch of equal-length token sequences -> (B, D_e)."""
        lengths = {len(s) for s in sequences}
        if len(lengths) != 1:
            raise ValueError(f"batched sequences must share a length, got {sorted(lengths)}")
        L = lengths.pop()
        ids = [int(i) for s in sequences for i in s]
        if any(i < 0 or i >= self.txt.vocab_size for i in ids):
            raise ValueError(f"unknown token id in {ids}")
        if L > self.txt.context:
            raise ValueError(f"sequence length {L} exceeds context {self.txt.context}")
        b = len(sequences)
        x = T.index_select(self._p("txt.tok"), ids, axis=0)
        x = T.reshape(x, (b, L, self.txt.width))
        x = T.add(x, T.slice_axis(self._p("txt.pos"), 0, 0, L))
        for i in range(self.txt.num_layers):
            x = self._block(x, f"txt.layers.{i}", self.txt.num_heads)
        x = T.layer_norm(x, self._p("txt.ln_f.g"), self._p("txt.ln_f.b"))
        eos = T.reshape(T.slice_axis(x, 1, L - 1, L), (b, self.txt.width))
        return T.matmul(eos, T.transpose(self._p("txt.proj"), (1, 0)))


# ---------------------------------------------------------------------------
# classification and losses


def classify_batch(class_embs: Tensor, table: TextFeatureTable, tau: float) -> Tensor:
    """softmax over classes of cos(t_i, v)/tau, rows of `class_embs` as v."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if table.num_classes < 2:
        raise ValueError("need at least 2 classes")
    feats = Tensor(np.asarray(table.features, dtype=class_embs.data.dtype))
    v = T.l2_normalize(class_embs, axis=-1)
    cos = T.matmul(v, T.transpose(feats, (1, 0)))
    return T.softmax(T.mul(cos, 1.0 / tau), axis=-1)


def classify(class_emb: Tensor, table: TextFeatureTable, tau: float) -> Tensor:
    probs = classify_batch(T.reshape(class_emb, (1, class_emb.shape[-1])), table, tau)
    return T.reshape(probs, (table.num_classes,))


def build_text_table(model: ClipModel, class_names: list[str],
                     templates: list[str]) -> TextFeatureTable:
    """Ensemble: encode each filled template, normalize, average, renormalize."""
    if not templates:
        raise ValueError("need at least one prompt template")
    for t in templates:
        if "{class}" not in t:
            raise ValueError(f"template {t!r} has no {{class}} slot")
    rows = np.zeros((len(class_names), model.vit.out_dim), dtype=np.float32)
    with T.no_grad():
        for i, name in enumerate(class_names):
            acc = np.zeros(model.vit.out_dim, dtype=np.float64)
            for tmpl in templates:
                ids = model.vocab.encode(tmpl.replace("{class}", name))
                emb = model.encode_text(ids).data.astype(np.float64)
                acc += emb / np.linalg.norm(emb)
            acc /= len(templates)
            rows[i] = (acc / np.linalg.norm(acc)).astype(np.float32)
    return TextFeatureTable(list(class_names), rows)


def contrastive_loss(image_embs: Tensor, text_embs: Tensor, scale) -> Tensor:
    """Symmetric InfoNCE over a batch of matched (image, text) rows.

    `scale` is 1/tau, either a float or a scalar Tensor (learnable).
    Rows are expected to be L2-normalized.
    """
    if image_embs.shape != text_embs.shape:
        raise ValueError(f"batch mismatch: {image_embs.shape} vs {text_embs.shape}")
    b = image_embs.shape[0]
    sims = T.matmul(image_embs, T.transpose(text_embs, (1, 0)))
    logits = T.mul(sims, scale) if isinstance(scale, Tensor) else T.mul(sims, float(scale))
    eye = Tensor(np.eye(b, dtype=image_embs.data.dtype))
    row = T.tsum(T.mul(T.log_softmax(logits, axis=1), eye))
    col = T.tsum(T.mul(T.log_softmax(logits, axis=0), eye))
    return T.mul(T.add(row, col), -0.5 / b)

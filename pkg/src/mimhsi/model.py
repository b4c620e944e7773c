"""Full patch classifier: pixel embedding, per-layer four-scan encoder bank,
weighted scan fusion, cascade down to a 1x1 feature, per-scale decoders,
multi-scale loss, AdamW training, and checkpoint serialization."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .data import DataError, extract_patches
from .encoder import TMambaParams, init_tmamba_params, make_context, tmamba_forward
from .scan import DESIGNS, gather_by_map, scatter_by_map

FUSIONS = ("pre-merge", "post-merge")
CASCADES = ("fused", "per-branch")


@dataclass
class MimConfig:
    patch: int = 7
    bands: int = 60
    embed_dim: int = 64      # per-pixel feature width after embedding
    hidden_dim: int = 64     # encoder-internal width
    n_classes: int = 2
    depth: int = 2           # conv+scan units per direction branch
    state_dim: int = 16
    conv_width: int = 4
    scan_design: str = "mamba"
    scan_types: int = 4
    fusion: str = "pre-merge"
    use_stl: bool = True
    use_gdm: bool = True
    use_stf: bool = True
    cascade: str = "fused"

    def validate(self):
        if self.patch < 3 or self.patch % 2 == 0:
            raise ValueError("patch size must be odd and >= 3")
        if self.scan_design not in DESIGNS:
            raise ValueError(f"unknown scan design '{self.scan_design}'")
        if not 1 <= self.scan_types <= 4:
            raise ValueError("scan_types must be 1..4")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.cascade not in CASCADES:
            raise ValueError(f"cascade must be one of {CASCADES}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        for name in ("bands", "embed_dim", "hidden_dim", "depth", "state_dim", "conv_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        return self

    @property
    def n_layers(self):
        return (self.patch - 1) // 2

    @property
    def layer_sizes(self):
        """Spatial side length consumed by each layer: p, p-2, ..., 3."""
        return list(range(self.patch, 2, -2))

    @property
    def scale_sizes(self):
        """Side length of each recorded scale feature: p-2, ..., 1."""
        return list(range(self.patch - 2, -1, -2))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class LayerParams:
    encoders: list            # TMambaParams per scan type (non-shared)
    wmf_logits: Tensor        # [scan_types]; softmax gives the fusion weights


@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class MimParams:
    embed_w: Tensor
    embed_b: Tensor
    layers: list = field(default_factory=list)
    heads: list = field(default_factory=list)

    def named(self):
        yield "embed.w", self.embed_w
        yield "embed.b", self.embed_b
        for i, layer in enumerate(self.layers):
            for m, enc in enumerate(layer.encoders):
                yield from enc.named(f"layer{i}.enc{m + 1}")
            yield f"layer{i}.wmf_logits", layer.wmf_logits
        for i, head in enumerate(self.heads):
            yield f"head{i}.w1", head.w1
            yield f"head{i}.b1", head.b1
            yield f"head{i}.w2", head.w2
            yield f"head{i}.b2", head.b2


def init_mim_params(cfg: MimConfig, rng) -> MimParams:
    def linear(nin, nout):
        return Tensor(rng.normal(0.0, nin ** -0.5, size=(nin, nout)), requires_grad=True)

    def bias(nout):
        return Tensor(np.zeros(nout), requires_grad=True)

    params = MimParams(embed_w=linear(cfg.bands, cfg.embed_dim), embed_b=bias(cfg.embed_dim))
    for p in cfg.layer_sizes:
        encoders = [
            init_tmamba_params(rng, p, cfg.embed_dim, cfg.hidden_dim,
                               depth=cfg.depth, state_dim=cfg.state_dim, conv_width=cfg.conv_width)
            for _ in range(cfg.scan_types)
        ]
        params.layers.append(LayerParams(
            encoders=encoders,
            wmf_logits=Tensor(np.zeros(cfg.scan_types), requires_grad=True),
        ))
    for _ in cfg.scale_sizes:
        params.heads.append(HeadParams(
            w1=linear(cfg.embed_dim, cfg.embed_dim), b1=bias(cfg.embed_dim),
            w2=linear(cfg.embed_dim, cfg.n_classes), b2=bias(cfg.n_classes),
        ))
    return params


# -- forward pieces -------------------------------------------------------------


def pixel_embed(patches, w, b):
    """Shared per-pixel linear map [..., p, p, C] -> [..., p, p, C2]."""
    return ad.add(ad.matmul(patches, w), b)


def mim_layer(features, layer: LayerParams, contexts, cfg: MimConfig):
    """Run the scan-type encoder bank on one scale and fuse with softmax weights.

    features: one grid [B, q, q, C2], or a per-type list in per-branch cascade.
    Returns (per-type output grids at q-2, fused grid).
    """
    outs = []
    for idx in range(cfg.scan_types):
        grid = features[idx] if isinstance(features, list) else features
        ctx = contexts[idx]
        seq = gather_by_map(grid, ctx.scan)
        enc = ad.tanh(tmamba_forward(
            seq, ctx, layer.encoders[idx],
            use_stl=cfg.use_stl, use_gdm=cfg.use_gdm, use_stf=cfg.use_stf,
            pre_merge=(cfg.fusion == "pre-merge"),
        ))
        outs.append(scatter_by_map(enc, ctx.scan_small))
    weights = ad.softmax(layer.wmf_logits, axis=-1)
    fused = None
    for idx, o in enumerate(outs):
        term = ad.mul(o, weights[idx])
        fused = term if fused is None else ad.add(fused, term)
    return outs, fused


def decode_scale(feature, head: HeadParams):
    """Mean over positions -> Tanh -> two-layer MLP -> class logits."""
    pooled = ad.mean(feature, axis=(-3, -2))
    hid = ad.tanh(ad.add(ad.matmul(ad.tanh(pooled), head.w1), head.b1))
    return ad.add(ad.matmul(hid, head.w2), head.b2)


def multiscale_loss(scale_logits, labels):
    """Cross-entropy at every scale, averaged over scales (and the batch)."""
    if not scale_logits:
        raise ValueError("need at least one scale")
    losses = [ad.cross_entropy_with_softmax(lg, labels) for lg in scale_logits]
    total = losses[0]
    for piece in losses[1:]:
        total = ad.add(total, piece)
    return ad.div(total, float(len(losses))), losses


class MimModel:
    """Config + parameters + the per-layer scan geometry."""

    def __init__(self, cfg: MimConfig, params: MimParams | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.params = params if params is not None else init_mim_params(cfg, self.rng)
        self.contexts = [
            [make_context(p, cfg.scan_design, t + 1) for t in range(cfg.scan_types)]
            for p in cfg.layer_sizes
        ]

    def named_parameters(self):
        return list(self.params.named())

    def parameter_tensors(self):
        return [t for _, t in self.params.named()]

    def scale_features(self, patches):
        """Embed and cascade; returns the fused feature grid of every scale."""
        x = pixel_embed(patches, self.params.embed_w, self.params.embed_b)
        current = [x] * self.cfg.scan_types if self.cfg.cascade == "per-branch" else x
        scales = []
        for li in range(self.cfg.n_layers):
            outs, fused = mim_layer(current, self.params.layers[li], self.contexts[li], self.cfg)
            scales.append(fused)
            current = outs if self.cfg.cascade == "per-branch" else fused
        return scales

    def scale_logits(self, patches):
        feats = self.scale_features(patches)
        return [decode_scale(f, h) for f, h in zip(feats, self.params.heads)]

    def loss(self, patches, labels):
        logits = self.scale_logits(patches)
        total, per_scale = multiscale_loss(logits, labels)
        return total, per_scale, logits

    def predict_logits(self, patches):
        """Inference: mean of the per-scale logits, as a plain array."""
        with ad.no_grad():
            logits = self.scale_logits(patches)
            return np.mean([lg.data for lg in logits], axis=0)


# -- optimizer -------------------------------------------------------------------


class AdamW:
    """Decoupled weight decay Adam; parameter order is fixed at construction
    so updates are bit-deterministic."""

    def __init__(self, tensors, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.tensors = list(tensors)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.tensors]
        self.v = [np.zeros_like(p.data) for p in self.tensors]

    def step(self, grads):
        if len(grads) != len(self.tensors):
            raise ValueError("gradient list does not match parameters")
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.tensors, grads, self.m, self.v):
            gd = g.data if isinstance(g, Tensor) else g
            m *= self.b1
            m += (1.0 - self.b1) * gd
            v *= self.b2
            v += (1.0 - self.b2) * gd * gd
            p.data -= self.lr * self.wd * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# -- training ---------------------------------------------------------------------


def train_model(cube, labels, manifest, cfg: MimConfig, *, seed, epochs,
                batch_size=64, lr=5e-4, weight_decay=0.01, log=None):
    """Train on the manifest's train pixels; deterministic given the seed.

    Returns (model, history) where history has one row per epoch with the
    total loss, per-scale losses, and train overall accuracy.
    """
    rng = np.random.default_rng(seed)  # init and epoch shuffling share one stream
    model = MimModel(cfg, params=init_mim_params(cfg, rng), seed=seed)

    coords, targets = [], []
    for cls in sorted(manifest.train):
        for rc in manifest.train[cls]:
            coords.append(rc)
            targets.append(cls - 1)
    coords = np.asarray(coords, dtype=np.intp)
    targets = np.asarray(targets, dtype=np.intp)
    patches = extract_patches(cube, coords, cfg.patch)

    opt = AdamW(model.parameter_tensors(), lr=lr, weight_decay=weight_decay)
    history = []
    n = len(targets)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        per_scale = np.zeros(len(cfg.scale_sizes))
        correct = 0
        for lo in range(0, n, batch_size):
            idx = perm[lo : lo + batch_size]
            batch = Tensor(patches[idx])
            lab = targets[idx]
            try:
                loss, scale_losses, logits = model.loss(batch, lab)
                grads = ad.grad(loss, opt.tensors)
            except NumericError as exc:
                raise NumericError(
                    f"training diverged at epoch {epoch}, batch {lo // batch_size}: {exc}"
                ) from exc
            opt.step(grads)
            mean_logits = np.mean([lg.data for lg in logits], axis=0)
            correct += int((mean_logits.argmax(axis=1) == lab).sum())
            total += loss.item() * len(idx)
            per_scale += np.array([sl.item() for sl in scale_losses]) * len(idx)
        row = {
            "epoch": epoch,
            "loss": total / n,
            "scale_losses": list(per_scale / n),
            "train_oa": correct / n,
        }
        history.append(row)
        if log:
            scales = " ".join(f"{v:.4f}" for v in row["scale_losses"])
            log(f"epoch {epoch:3d}  loss {row['loss']:.4f}  scales [{scales}]  train_oa {row['train_oa']:.4f}")
    return model, history


def predict_classes(model, cube, coords, batch_size=64):
    """Class ids (1-based) for the given pixel coordinates."""
    coords = np.asarray(coords, dtype=np.intp)
    out = np.empty(len(coords), dtype=np.uint16)
    for lo in range(0, len(coords), batch_size):
        chunk = coords[lo : lo + batch_size]
        patches = Tensor(extract_patches(cube, chunk, model.cfg.patch))
        logits = model.predict_logits(patches)
        out[lo : lo + len(chunk)] = logits.argmax(axis=1).astype(np.uint16) + 1
    return out


def predict_map(model, cube, label_map=None, batch_size=64):
    """Per-pixel class map; restricted to labeled pixels when labels are given."""
    h, w = cube.h, cube.w
    if label_map is None:
        coords = np.argwhere(np.ones((h, w), dtype=bool))
    else:
        coords = np.argwhere(label_map.data > 0)
    result = np.zeros((h, w), dtype=np.uint16)
    if len(coords):
        result[coords[:, 0], coords[:, 1]] = predict_classes(model, cube, coords, batch_size)
    return result


# -- checkpoint serialization ------------------------------------------------------


CKPT_MAGIC = b"MIMC"
CKPT_VERSION = 1


def save_checkpoint(path, model: MimModel, seed):
    """Versioned little-endian store of every named parameter tensor."""
    records = model.named_parameters()
    blob = json.dumps({"config": model.cfg.to_dict(), "seed": int(seed)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for name, tensor in records:
            enc = name.encode()
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            data = np.ascontiguousarray(tensor.data, dtype="<f8")
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise DataError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; bit-exact round trip with save."""
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise DataError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CKPT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "header"))
        meta = json.loads(_read_exact(fh, blob_len, "config"))
        cfg = MimConfig.from_dict(meta["config"])
        seed = int(meta["seed"])
        (n_records,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        arrays = {}
        for _ in range(n_records):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode()
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            payload = _read_exact(fh, 8 * int(np.prod(shape, dtype=np.int64)), f"payload of {name}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise DataError("trailing bytes after checkpoint records")
    model = MimModel(cfg, seed=seed)
    named = dict(model.named_parameters())
    if set(named) != set(arrays):
        raise DataError("checkpoint parameter names do not match the config")
    for name, tensor in named.items():
        if tensor.data.shape != arrays[name].shape:
            raise DataError(f"shape mismatch for '{name}'")
        tensor.data = arrays[name]
    return model, seed

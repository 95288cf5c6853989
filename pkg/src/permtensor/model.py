"""Desk-scale hybrid convolution / multi-axis attention regressor.

Layout::

    image (B, H, W) -> 3x3 conv stride 2 (stem)
      -> per stage: avg-pool 2 -> MBConv -> block attention -> grid attention
                    [-> FiLM(porosity) for configured stages]
      -> global average pool -> LayerNorm -> Linear/GELU/Dropout x 2 -> Linear(4)

Outputs are ordered ``[kxx, kxy, kyx, kyy]``.  Feature maps are
channels-last.  Stages whose resolution is at most the window size P use
full self-attention for both attention blocks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BACKBONE_GROUP_PREFIXES = ("stem", "stage")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: tuple = (1, 1, 1)
    window: int = 4
    heads: int = 2
    mbconv_expand: int = 4
    head_hidden: tuple = (64, 32)
    dropout_p: float = 0.1
    porosity_hidden: tuple = (8, 16)
    porosity_embed_dim: int = 16
    film_stages: tuple | None = None  # None -> every stage but the first
    film: bool = True

    def __post_init__(self):
        for name in ("stage_channels", "blocks_per_stage", "head_hidden", "porosity_hidden"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.film_stages is None:
            object.__setattr__(self, "film_stages", tuple(range(1, len(self.stage_channels))))
        else:
            object.__setattr__(self, "film_stages", tuple(self.film_stages))
        n = len(self.stage_channels)
        if len(self.blocks_per_stage) != n:
            raise ConfigError("blocks_per_stage must have one entry per stage")
        if self.image_size % 2 ** (n + 1):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^{n + 1}")
        for s, res in enumerate(self.stage_resolutions):
            if res > self.window and res % self.window:
                raise ConfigError(f"stage {s} resolution {res} not divisible by window {self.window}")
        for c in self.stage_channels:
            if c % self.heads:
                raise ConfigError(f"channels {c} not divisible by {self.heads} heads")
        if any(s < 0 or s >= n for s in self.film_stages):
            raise ConfigError(f"film_stages {self.film_stages} out of range for {n} stages")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")

    @property
    def stage_resolutions(self) -> list[int]:
        return [self.image_size // 2 ** (s + 2) for s in range(len(self.stage_channels))]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ParameterSet:
    """Ordered named parameters, each tagged with a group and a frozen flag."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value, group: str) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True, name=name)
        self.tensors[name] = t
        self.groups[name] = group
        return t

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self, groups=None) -> list[str]:
        if groups is None:
            return list(self.tensors)
        groups = set(groups)
        return [n for n in self.tensors if self.groups[n] in groups]

    def group_set(self) -> list[str]:
        return list(dict.fromkeys(self.groups.values()))

    def set_trainable_groups(self, groups) -> None:
        groups = set(groups)
        self.frozen = {n for n in self.tensors if self.groups[n] not in groups}

    def trainable(self) -> list[str]:
        return [n for n in self.tensors if n not in self.frozen]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self, names=None) -> int:
        names = self.names() if names is None else names
        return int(sum(self.tensors[n].size for n in names))

    def state(self) -> dict:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_state(self, state: dict) -> None:
        missing = set(self.tensors) - set(state)
        if missing:
            raise KeyError(f"state lacks parameters: {sorted(missing)[:5]}")
        for n, t in self.tensors.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def flat(self, names=None) -> np.ndarray:
        names = self.names() if names is None else names
        return np.concatenate([self.tensors[n].data.ravel() for n in names]) if names else np.zeros(0)

    def blob(self, names=None) -> bytes:
        return self.flat(names).astype("<f8").tobytes()

    def backbone_names(self) -> list[str]:
        return [n for n in self.tensors if self.groups[n].startswith(BACKBONE_GROUP_PREFIXES)]


# ---------------------------------------------------------------- building blocks

def _attention_tokens(tokens: Tensor, p: dict, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention over axis 1 of (N, T, C)."""
    N, T, C = tokens.shape
    d = C // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (N, T, heads, d)), (0, 2, 1, 3))

    q = split(ad.linear(tokens, p["q.w"], p["q.b"]))
    k = split(ad.linear(tokens, p["k.w"], p["k.b"]))
    v = split(ad.linear(tokens, p["v.w"], p["v.b"]))
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d))
    out = ad.matmul(ad.softmax(scores), v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (N, T, C))
    return ad.linear(out, p["o.w"], p["o.b"])


def _check_spatial(x, P):
    B, H, W, C = x.shape
    if H != W:
        raise ad.ShapeError(f"attention expects square feature maps, got {(H, W)}")
    if H > P and H % P:
        raise ad.ShapeError(f"feature map {H}x{W} not divisible by window {P}")
    return B, H, W, C


def block_local_attention(x: Tensor, p: dict, P: int, heads: int) -> Tensor:
    """Pre-norm self-attention inside non-overlapping P x P windows, plus residual."""
    B, H, W, C = _check_spatial(x, P)
    Pe = min(P, H)
    h = ad.layer_norm(x, p["ln.g"], p["ln.b"])
    y = _attention_tokens(ad.window_partition(h, Pe), p, heads)
    return x + ad.window_merge(y, Pe, B, H, W)


def grid_global_attention(x: Tensor, p: dict, P: int, heads: int) -> Tensor:
    """Pre-norm self-attention among tokens sharing an intra-window offset, plus residual.

    When the map is no larger than one window the grid degenerates to a
    single group and this is exactly :func:`block_local_attention`.
    """
    B, H, W, C = _check_spatial(x, P)
    if H <= P:
        return block_local_attention(x, p, P, heads)
    h = ad.layer_norm(x, p["ln.g"], p["ln.b"])
    y = _attention_tokens(ad.grid_partition(h, P), p, heads)
    return x + ad.grid_merge(y, P, B, H, W)


def mbconv_block(x: Tensor, p: dict) -> Tensor:
    """LN -> pointwise expand -> GELU -> depthwise 3x3 -> GELU -> pointwise project.

    The input is added back when channel counts match.
    """
    h = ad.layer_norm(x, p["ln.g"], p["ln.b"])
    h = ad.gelu(ad.pointwise_conv(h, p["expand.w"], p["expand.b"]))
    h = ad.gelu(ad.depthwise_conv3x3(h, p["dw.w"], p["dw.b"]))
    h = ad.pointwise_conv(h, p["project.w"], p["project.b"])
    return x + h if h.shape == x.shape else h


def porosity_encoder(phi: Tensor, p: dict, n_layers: int) -> Tensor:
    """MLP from (B, 1) porosity to (B, embed) with ReLU between layers."""
    h = phi
    for i in range(n_layers):
        h = ad.linear(h, p[f"l{i}.w"], p[f"l{i}.b"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def film_modulate(x: Tensor, e_phi: Tensor, p: dict) -> Tensor:
    """gamma(e) * x + beta(e), per channel, broadcast over the spatial axes."""
    B, C = x.shape[0], x.shape[-1]
    gamma = ad.reshape(ad.linear(e_phi, p["gamma.w"], p["gamma.b"]), (B, 1, 1, C))
    beta = ad.reshape(ad.linear(e_phi, p["beta.w"], p["beta.b"]), (B, 1, 1, C))
    return gamma * x + beta


# ---------------------------------------------------------------- model

class Model:
    """Parameters plus the forward pass.

    ``label_mean`` (4 values) initialises the output bias; the output
    weights start small (std 1e-2), with identical kxy and kyx rows.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, label_mean=None):
        self.cfg = cfg or ModelConfig()
        self.params = _init_params(self.cfg, np.random.default_rng(seed), label_mean)

    def _sub(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: t for k, t in self.params.tensors.items() if k.startswith(prefix + ".")}

    def forward(self, images, phi, train: bool = False, seed: int | None = None,
                film: bool | None = None) -> Tensor:
        """Raw (B, 4) prediction.  ``train`` enables dropout, seeded by ``seed``."""
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if images.shape[1:] != (cfg.image_size, cfg.image_size):
            raise ad.ShapeError(f"model expects {cfg.image_size}x{cfg.image_size} images, "
                                f"got {images.shape[1:]}")
        B = images.shape[0]
        phi = np.broadcast_to(np.asarray(phi, dtype=np.float64), (B,)).reshape(B, 1)
        use_film = cfg.film if film is None else film
        rng = np.random.default_rng(seed) if train else None
        P = self.params

        x = ad.conv3x3(Tensor(images[..., None]), P["stem.w"], P["stem.b"], stride=2)
        x = ad.gelu(x)
        e_phi = None
        if use_film and cfg.film_stages:
            e_phi = porosity_encoder(Tensor(phi), self._sub("encoder"), len(cfg.porosity_hidden) + 1)
        for s in range(len(cfg.stage_channels)):
            x = ad.avg_pool2(x)
            for b in range(cfg.blocks_per_stage[s]):
                pre = f"stage{s}.b{b}"
                x = mbconv_block(x, self._sub(pre + ".mb"))
                x = block_local_attention(x, self._sub(pre + ".block"), cfg.window, cfg.heads)
                x = grid_global_attention(x, self._sub(pre + ".grid"), cfg.window, cfg.heads)
            if e_phi is not None and s in cfg.film_stages:
                x = film_modulate(x, e_phi, self._sub(f"film{s}"))

        f = ad.mean(x, axis=(1, 2))
        h = ad.layer_norm(f, P["head.ln.g"], P["head.ln.b"])
        for i in range(len(cfg.head_hidden)):
            h = ad.gelu(ad.linear(h, P[f"head.l{i}.w"], P[f"head.l{i}.b"]))
            h = ad.dropout(h, cfg.dropout_p, train, rng)
        return ad.linear(h, P["head.out.w"], P["head.out.b"])

    def predict(self, images, phi, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        phi = np.broadcast_to(np.asarray(phi, dtype=np.float64), (len(images),))
        out = [self.forward(images[i:i + batch_size], phi[i:i + batch_size]).data
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out)

    def has_normalization_statistics(self) -> bool:
        # layer normalisation only: nothing accumulates across batches
        return False


def _init_params(cfg: ModelConfig, rng: np.random.Generator, label_mean) -> ParameterSet:
    ps = ParameterSet()

    def normal(shape, std):
        return rng.standard_normal(shape) * std

    def linear(name, n_in, n_out, group, std=None, bias=0.0):
        std = np.sqrt(1.0 / n_in) if std is None else std
        ps.add(name + ".w", normal((n_in, n_out), std), group)
        ps.add(name + ".b", np.full(n_out, bias, dtype=np.float64), group)

    def norm(name, c, group):
        ps.add(name + ".g", np.ones(c), group)
        ps.add(name + ".b", np.zeros(c), group)

    ps.add("stem.w", normal((3, 3, 1, cfg.stem_channels), np.sqrt(2.0 / 9)), "stem")
    ps.add("stem.b", np.zeros(cfg.stem_channels), "stem")

    c_in = cfg.stem_channels
    for s, c in enumerate(cfg.stage_channels):
        group = f"stage{s}"
        for b in range(cfg.blocks_per_stage[s]):
            pre = f"stage{s}.b{b}"
            e = cfg.mbconv_expand * c
            norm(pre + ".mb.ln", c_in, group)
            linear(pre + ".mb.expand", c_in, e, group)
            ps.add(pre + ".mb.dw.w", normal((3, 3, e), 1.0 / 3.0), group)
            ps.add(pre + ".mb.dw.b", np.zeros(e), group)
            linear(pre + ".mb.project", e, c, group)
            for kind in ("block", "grid"):
                norm(f"{pre}.{kind}.ln", c, group)
                for m in ("q", "k", "v", "o"):
                    linear(f"{pre}.{kind}.{m}", c, c, group)
            c_in = c

    if cfg.film_stages:
        dims = (1,) + cfg.porosity_hidden + (cfg.porosity_embed_dim,)
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            # zero final layer: e_phi = 0 at start, so FiLM is the identity
            linear(f"encoder.l{i}", dims[i], dims[i + 1], "encoder",
                   std=0.0 if last else np.sqrt(2.0 / dims[i]))
        E = cfg.porosity_embed_dim
        for s in cfg.film_stages:
            c = cfg.stage_channels[s]
            linear(f"film{s}.gamma", E, c, "film", std=0.1 / np.sqrt(E), bias=1.0)
            linear(f"film{s}.beta", E, c, "film", std=0.1 / np.sqrt(E), bias=0.0)

    c = cfg.stage_channels[-1]
    norm("head.ln", c, "head")
    dims = (c,) + cfg.head_hidden
    for i in range(len(cfg.head_hidden)):
        linear(f"head.l{i}", dims[i], dims[i + 1], "head", std=np.sqrt(2.0 / dims[i]))
    linear("head.out", dims[-1], 4, "head", std=1e-2)
    if label_mean is not None:
        ps["head.out.b"].data = np.asarray(label_mean, dtype=np.float64).reshape(4).copy()
    # kxy and kyx start from the same weights and bias; with symmetric labels
    # their updates then stay nearly equal
    out_w, out_b = ps["head.out.w"].data, ps["head.out.b"].data
    out_w[:, 2] = out_w[:, 1]
    out_b[1] = out_b[2] = 0.5 * (out_b[1] + out_b[2])
    return ps


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: Model, path, **meta) -> Path:
    """Write ``manifest.json`` + ``params.bin`` (little-endian float64) into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = model.params.blob()
    manifest = {
        "config": model.cfg.to_dict(),
        "parameters": [{"name": n, "shape": list(model.params[n].shape),
                        "group": model.params.groups[n]} for n in model.params.names()],
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        **meta,
    }
    (path / "params.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    manifest = json.loads((path / "manifest.json").read_text())
    blob = (path / "params.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ValueError(f"checkpoint blob at {path} is corrupt (hash mismatch)")
    model = Model(ModelConfig.from_dict(manifest["config"]))
    flat = np.frombuffer(blob, dtype="<f8")
    state, off = {}, 0
    for entry in manifest["parameters"]:
        n = int(np.prod(entry["shape"]))
        state[entry["name"]] = flat[off:off + n].reshape(entry["shape"]).astype(np.float64)
        off += n
    if off != flat.size:
        raise ValueError("checkpoint blob length does not match the manifest")
    model.params.load_state(state)
    return model, manifest

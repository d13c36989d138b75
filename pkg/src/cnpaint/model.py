"""Masked denoising transformer over stroke sequences.

The network reads the noisy target strokes and the clean context strokes,
embeds them jointly (one linear over the concatenated 16 channels plus fixed
sinusoidal position codes), and refines features through residual blocks
whose scale/shift/gate are regressed from a conditioning vector (noise level
plus class). Attention mixes content scores with a position-derived bias so
spatially close strokes attend to each other more; the mixing weight grows
as the noise level drops. All gate projections start at zero, so a freshly
initialized network is the identity around every branch and predicts zero
noise.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct

import numpy as np

from . import autograd as ag
from .autograd import Tensor

CKPT_MAGIC = b"CNPckpt1"
COND_EMBED_DIM = 256


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    layers: int
    feature_dim: int
    heads: int
    num_classes: int = 2
    seq_len: int = 360
    lambda_min: float = 0.0
    lambda_max: float = 0.5
    logsnr_min: float = -15.0
    logsnr_max: float = 15.0
    variant: str = "custom"

    def __post_init__(self):
        if self.feature_dim % self.heads:
            raise ValueError("feature_dim must be divisible by heads")
        if self.layers < 1 or self.num_classes < 1 or self.seq_len < 1:
            raise ValueError("layers, num_classes and seq_len must be positive")

    @classmethod
    def small(cls, **kw) -> "ModelConfig":
        return cls(layers=6, feature_dim=576, heads=6, variant="S", **kw)

    @classmethod
    def base(cls, **kw) -> "ModelConfig":
        return cls(layers=8, feature_dim=768, heads=12, variant="B", **kw)

    @classmethod
    def large(cls, **kw) -> "ModelConfig":
        return cls(layers=12, feature_dim=768, heads=12, variant="L", **kw)

    @property
    def null_class(self) -> int:
        return self.num_classes

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed (length, dim) table: interleaved sin/cos at geometric wavelengths."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, idx / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : table[:, 1::2].shape[1]])
    return table


def freq_embedding(values, dim: int = COND_EMBED_DIM) -> np.ndarray:
    """Sinusoidal scalar embedding: [cos(v*f_k), sin(v*f_k)] over dim/2 freqs."""
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = values[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def lambda_schedule(logsnr, lam_min: float, lam_max: float,
                    logsnr_min: float = -15.0, logsnr_max: float = 15.0):
    """Linear map from [logsnr_min, logsnr_max] to [lam_min, lam_max], clamped."""
    u = (np.asarray(logsnr, dtype=np.float64) - logsnr_min) / (logsnr_max - logsnr_min)
    return lam_min + np.clip(u, 0.0, 1.0) * (lam_max - lam_min)


def paab_scores(positions: np.ndarray) -> np.ndarray:
    """Row-stochastic proximity matrix: softmax over -squared-distance.

    positions: (..., L, 2) stroke centers; returns (..., L, L).
    """
    pos = np.asarray(positions, dtype=np.float64)
    diff = pos[..., :, None, :] - pos[..., None, :, :]
    logits = -(diff**2).sum(axis=-1)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def _swap_last(t: Tensor) -> Tensor:
    n = t.data.ndim
    return ag.transpose(t, tuple(range(n - 2)) + (n - 1, n - 2))


def attention_paab(q: Tensor, k: Tensor, v: Tensor, P: np.ndarray, lam) -> tuple[Tensor, Tensor]:
    """Attention with a convex mix of content scores and the position bias.

    sigma = lam*P + (1-lam)*softmax(q k^T / sqrt(d)); returns (sigma @ v, sigma).
    lam may be a scalar or an array broadcastable over sigma's batch dims.
    """
    dh = q.shape[-1]
    scores = (q @ _swap_last(k)) * (1.0 / math.sqrt(dh))
    content = ag.softmax(scores, axis=-1)
    lam_arr = np.asarray(lam, dtype=q.dtype)
    sigma = content * Tensor(np.asarray(1.0 - lam_arr, dtype=q.dtype)) \
        + Tensor(np.asarray(P * lam_arr, dtype=q.dtype))
    return sigma @ v, sigma


class MDTModel:
    """Noise predictor: (noisy target, context, mask, class, logsnr) -> noise."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.norm_mu = np.zeros(8, dtype=np.float64)
        self.norm_sigma = np.ones(8, dtype=np.float64)
        self.pe = sinusoidal_positions(config.seq_len, config.feature_dim).astype(self.dtype)
        self.params: dict[str, Tensor] = {}
        self._init_params(rng or np.random.default_rng(0))

    # -- parameters ----------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        F = cfg.feature_dim

        def param(name, data):
            self.params[name] = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)

        def xavier(fan_in, fan_out):
            a = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-a, a, (fan_in, fan_out))

        param("in_proj.w", xavier(16, F))
        param("in_proj.b", np.zeros(F))
        param("cond.w1", xavier(COND_EMBED_DIM, F))
        param("cond.b1", np.zeros(F))
        param("cond.w2", xavier(F, F))
        param("cond.b2", np.zeros(F))
        param("class_emb", rng.normal(0.0, 0.02, (cfg.num_classes + 1, F)))
        # modulation bias: scale terms start at 1, shifts and gates at 0, so
        # every block is the identity until training moves the gates
        mod_bias = np.concatenate([np.ones(F), np.zeros(F), np.zeros(F),
                                   np.ones(F), np.zeros(F), np.zeros(F)])
        for i in range(cfg.layers):
            param(f"blocks.{i}.mod.w", np.zeros((F, 6 * F)))
            param(f"blocks.{i}.mod.b", mod_bias)
            for name in ("q", "k", "v", "o"):
                param(f"blocks.{i}.attn.w{name}", xavier(F, F))
                param(f"blocks.{i}.attn.b{name}", np.zeros(F))
            param(f"blocks.{i}.mlp.w1", xavier(F, 4 * F))
            param(f"blocks.{i}.mlp.b1", np.zeros(4 * F))
            param(f"blocks.{i}.mlp.w2", xavier(4 * F, F))
            param(f"blocks.{i}.mlp.b2", np.zeros(F))
        param("head.w", np.zeros((F, 8)))
        param("head.b", np.zeros(8))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ValueError(f"parameter set mismatch: {sorted(missing)[:4]}")
        for k, v in state.items():
            arr = np.asarray(v, dtype=self.dtype)
            if arr.shape != self.params[k].data.shape:
                raise ValueError(f"shape mismatch for {k}")
            self.params[k].data = np.ascontiguousarray(arr)

    def clone(self) -> "MDTModel":
        twin = MDTModel.__new__(MDTModel)
        twin.config, twin.dtype = self.config, self.dtype
        twin.norm_mu, twin.norm_sigma = self.norm_mu.copy(), self.norm_sigma.copy()
        twin.pe = self.pe
        twin.params = {k: Tensor(v.data.copy(), requires_grad=True)
                       for k, v in self.params.items()}
        return twin

    def set_normalization(self, mu, sigma) -> None:
        mu = np.asarray(mu, dtype=np.float64).reshape(8)
        sigma = np.asarray(sigma, dtype=np.float64).reshape(8)
        if (sigma <= 0).any():
            raise ValueError("sigma must be positive")
        self.norm_mu, self.norm_sigma = mu, sigma

    # -- forward ---------------------------------------------------------------

    def class_indices(self, labels) -> np.ndarray:
        """Map class ids (or None for the null token) to embedding rows."""
        out = []
        for c in np.atleast_1d(labels):
            if c is None:
                out.append(self.config.null_class)
                continue
            c = int(c)
            if not (0 <= c <= self.config.num_classes):
                raise ValueError(f"unknown class id {c}")
            out.append(c)
        return np.asarray(out, dtype=np.int64)

    def forward(self, s_p_t, s_ctx, mask, class_ids, logsnr) -> Tensor:
        cfg = self.config
        dt = self.dtype
        s_p_t = np.asarray(s_p_t, dtype=np.float64)
        s_ctx = np.asarray(s_ctx, dtype=np.float64)
        squeeze = s_p_t.ndim == 2
        if squeeze:
            s_p_t, s_ctx = s_p_t[None], s_ctx[None]
        B, L, _ = s_p_t.shape
        if s_ctx.shape != (B, L, 8) or L != cfg.seq_len:
            raise ValueError("context/target shapes do not match the configured length")
        mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), (B, L))
        ids = self.class_indices(class_ids)
        if ids.size == 1 and B > 1:
            ids = np.repeat(ids, B)
        logsnr = np.broadcast_to(np.atleast_1d(np.asarray(logsnr, dtype=np.float64)), (B,))

        # proximity bias from denormalized stroke centers of the combined
        # sequence; constant w.r.t. the weights
        stilde = s_p_t + s_ctx
        centers = np.clip(stilde[..., 0:2] * self.norm_sigma[0:2] + self.norm_mu[0:2], 0.0, 1.0)
        P = paab_scores(centers)[:, None]  # (B, 1, L, L) shared by heads/layers
        lam = lambda_schedule(logsnr, cfg.lambda_min, cfg.lambda_max,
                              cfg.logsnr_min, cfg.logsnr_max).reshape(B, 1, 1, 1)

        x = self.embed_inputs(s_p_t, s_ctx)
        cond = self.cond_embedding(logsnr, ids).reshape(B, 1, cfg.feature_dim)

        for i in range(cfg.layers):
            x = self._block(i, x, cond, P, lam)
        out = x @ self.params["head.w"] + self.params["head.b"]
        return out.reshape(L, 8) if squeeze else out

    __call__ = forward

    def embed_inputs(self, s_p_t, s_ctx) -> Tensor:
        """Joint linear over the 16 concatenated channels plus position codes.

        The two streams are mutually exclusive row-wise, so each row's
        embedding reads whichever stream is active there.
        """
        joint = np.concatenate([np.asarray(s_p_t), np.asarray(s_ctx)], axis=-1).astype(self.dtype)
        x = Tensor(joint) @ self.params["in_proj.w"] + self.params["in_proj.b"]
        return x + Tensor(self.pe)

    def cond_embedding(self, logsnr, class_ids) -> Tensor:
        """Noise-level embedding through a SiLU MLP, plus the class row."""
        p = self.params
        ids = self.class_indices(class_ids)
        temb = Tensor(freq_embedding(logsnr).astype(self.dtype))
        cond = ag.silu(temb @ p["cond.w1"] + p["cond.b1"]) @ p["cond.w2"] + p["cond.b2"]
        return cond + ag.take_rows(p["class_emb"], ids)

    def _block(self, i: int, x: Tensor, cond: Tensor, P: np.ndarray, lam: np.ndarray) -> Tensor:
        p = self.params
        F = self.config.feature_dim
        mod = ag.silu(cond) @ p[f"blocks.{i}.mod.w"] + p[f"blocks.{i}.mod.b"]
        chunks = [mod[:, :, j * F:(j + 1) * F] for j in range(6)]
        g1, b1, d1, g2, b2, d2 = chunks

        h = x * g1 + b1
        x = x + d1 * self._attention(i, h, P, lam)
        h = x * g2 + b2
        mlp = ag.gelu_tanh(h @ p[f"blocks.{i}.mlp.w1"] + p[f"blocks.{i}.mlp.b1"])
        mlp = mlp @ p[f"blocks.{i}.mlp.w2"] + p[f"blocks.{i}.mlp.b2"]
        return x + d2 * mlp

    def _attention(self, i: int, h: Tensor, P: np.ndarray, lam: np.ndarray) -> Tensor:
        p = self.params
        cfg = self.config
        B, L, F = h.shape
        H, dh = cfg.heads, F // cfg.heads

        def heads(name):
            proj = h @ p[f"blocks.{i}.attn.w{name}"] + p[f"blocks.{i}.attn.b{name}"]
            return ag.transpose(proj.reshape(B, L, H, dh), (0, 2, 1, 3))

        out, _ = attention_paab(heads("q"), heads("k"), heads("v"), P, lam)
        out = ag.transpose(out, (0, 2, 1, 3)).reshape(B, L, F)
        return out @ p[f"blocks.{i}.attn.wo"] + p[f"blocks.{i}.attn.bo"]


# -- checkpoint file -----------------------------------------------------------


@dataclasses.dataclass
class Checkpoint:
    config: ModelConfig
    step: int
    schedule: dict | None
    norm: dict
    rng_state: dict | None
    tensors: dict[str, np.ndarray]

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        cut = len(prefix) + 1
        found = {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}
        if not found:
            raise KeyError(f"checkpoint has no '{prefix}' tensors")
        return found


def save_checkpoint(path, model: MDTModel, *, step: int = 0, schedule: dict | None = None,
                    rng_state: dict | None = None, extra: dict | None = None) -> None:
    """Single-file checkpoint: magic, length-prefixed JSON header, then raw
    little-endian float32 tensors at the offsets listed in the manifest."""
    tensors: dict[str, np.ndarray] = {f"model/{k}": v.data for k, v in model.params.items()}
    for set_name, arrays in (extra or {}).items():
        for k, v in arrays.items():
            tensors[f"{set_name}/{k}"] = np.asarray(v)

    manifest = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest.append([name, list(arr.shape), offset])
        payloads.append(arr.tobytes())
        offset += len(payloads[-1])

    header = {
        "format": 1,
        "config": model.config.to_dict(),
        "step": int(step),
        "schedule": schedule,
        "norm": {"mu": model.norm_mu.tolist(), "sigma": model.norm_sigma.tolist()},
        "rng_state": rng_state,
        "manifest": manifest,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for chunk in payloads:
            f.write(chunk)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    if header.get("format") != 1:
        raise ValueError(f"unsupported checkpoint format: {header.get('format')!r}")
    tensors = {}
    for name, shape, offset in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[name] = flat.reshape(shape).copy()
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        step=header["step"],
        schedule=header.get("schedule"),
        norm=header["norm"],
        rng_state=header.get("rng_state"),
        tensors=tensors,
    )


def model_from_checkpoint(source, weights: str = "ema", dtype=np.float32) -> MDTModel:
    """Instantiate a model from a checkpoint path or Checkpoint, loading the
    requested weight set ('ema' falls back to 'model' if absent)."""
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    model = MDTModel(ckpt.config, dtype=dtype)
    try:
        state = ckpt.subset(weights)
    except KeyError:
        if weights != "ema":
            raise
        state = ckpt.subset("model")
    model.load_state_dict(state)
    model.set_normalization(ckpt.norm["mu"], ckpt.norm["sigma"])
    return model

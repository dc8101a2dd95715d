"""Sequence network built from scratch: embeddings with a unit-norm
constraint, a dense fusion layer, an LSTM, and a single-neuron linear head.

Forward and backward are exact, in 64-bit floats, over padded batches of
shape (batch, steps, ...). Gate order in the fused LSTM tensors is
input, forget, candidate, output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericalError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    discrete_features: tuple[str, ...]
    cardinalities: tuple[int, ...]  # declared sizes, excluding the unknown slot
    embedding_dims: tuple[int, ...]
    n_continuous: int
    fusion_size: int = 32
    hidden_size: int = 32

    def __post_init__(self) -> None:
        if not (len(self.discrete_features) == len(self.cardinalities) == len(self.embedding_dims)):
            raise ValueError("discrete feature names, cardinalities, and dims must align")

    @property
    def input_width(self) -> int:
        return int(sum(self.embedding_dims)) + self.n_continuous

    def embedding_rows(self, k: int) -> int:
        return self.cardinalities[k] + 1  # trailing row is the unknown slot

    def to_dict(self) -> dict:
        return {
            "discrete_features": list(self.discrete_features),
            "cardinalities": list(self.cardinalities),
            "embedding_dims": list(self.embedding_dims),
            "n_continuous": self.n_continuous,
            "fusion_size": self.fusion_size,
            "hidden_size": self.hidden_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(
            discrete_features=tuple(d["discrete_features"]),
            cardinalities=tuple(int(c) for c in d["cardinalities"]),
            embedding_dims=tuple(int(c) for c in d["embedding_dims"]),
            n_continuous=int(d["n_continuous"]),
            fusion_size=int(d["fusion_size"]),
            hidden_size=int(d["hidden_size"]),
        )


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return mat / np.maximum(norms, 1e-12)


def init_params(config: NetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-0.08, 0.08) weights, zero biases, forget-gate bias 1,
    embedding rows drawn then projected to unit norm."""
    H = config.hidden_size
    u = lambda *shape: rng.uniform(-0.08, 0.08, size=shape)
    params: dict[str, np.ndarray] = {}
    for name, card, dim in zip(config.discrete_features, config.cardinalities, config.embedding_dims):
        params[f"emb_{name}"] = _normalize_rows(u(card + 1, dim))
    params["fusion_w"] = u(config.fusion_size, config.input_width)
    params["fusion_b"] = np.zeros(config.fusion_size)
    params["lstm_wx"] = u(4 * H, config.fusion_size)
    params["lstm_wh"] = u(4 * H, H)
    b = np.zeros(4 * H)
    b[H:2 * H] = 1.0
    params["lstm_b"] = b
    params["out_v"] = u(H)
    params["out_b"] = np.zeros(1)
    return params


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward_batch(
    params: dict[str, np.ndarray],
    config: NetConfig,
    disc: np.ndarray,
    cont: np.ndarray,
    lengths: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Run the network over a padded batch.

    disc: (B, T, n_disc) int indices; cont: (B, T, n_cont); lengths: (B,).
    Returns per-step scalar outputs (B, T), hidden states (B, T, H), and the
    cache needed by backward_batch. Padded steps are computed but carry no
    meaning; callers must mask them.
    """
    B, T, _ = disc.shape
    H = config.hidden_size
    parts = [
        params[f"emb_{name}"][disc[:, :, k]]
        for k, name in enumerate(config.discrete_features)
    ]
    parts.append(cont)
    u = np.concatenate(parts, axis=2)  # (B, T, D)
    x = np.tanh(u @ params["fusion_w"].T + params["fusion_b"])  # (B, T, F)

    gates = np.empty((B, T, 4 * H))
    c = np.empty((B, T, H))
    tanh_c = np.empty((B, T, H))
    h = np.empty((B, T, H))
    wx, wh, b = params["lstm_wx"], params["lstm_wh"], params["lstm_b"]
    h_prev = np.zeros((B, H))
    c_prev = np.zeros((B, H))
    for t in range(T):
        z = x[:, t] @ wx.T + h_prev @ wh.T + b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o_gate = _sigmoid(z[:, 3 * H:])
        c_t = f * c_prev + i * g
        tc = np.tanh(c_t)
        h_t = o_gate * tc
        gates[:, t, :H] = i
        gates[:, t, H:2 * H] = f
        gates[:, t, 2 * H:3 * H] = g
        gates[:, t, 3 * H:] = o_gate
        c[:, t] = c_t
        tanh_c[:, t] = tc
        h[:, t] = h_t
        h_prev, c_prev = h_t, c_t
    with np.errstate(invalid="ignore", over="ignore"):
        o = h @ params["out_v"] + params["out_b"][0]  # (B, T)

    if not np.all(np.isfinite(o)):
        bad = np.argwhere(~np.isfinite(o))
        raise NumericalError(
            f"non-finite activation at step {int(bad[0][1])} of batch row {int(bad[0][0])}"
        )
    cache = {
        "disc": disc, "cont": cont, "u": u, "x": x, "gates": gates,
        "c": c, "tanh_c": tanh_c, "h": h, "lengths": np.asarray(lengths),
    }
    return o, h, cache


def forward(
    params: dict[str, np.ndarray],
    config: NetConfig,
    disc: np.ndarray,
    cont: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Single-sequence forward: disc (T, n_disc), cont (T, n_cont)."""
    T = disc.shape[0]
    o, h, cache = forward_batch(
        params, config, disc[None], cont[None], np.array([T])
    )
    return o[0], h[0], cache


def backward_batch(
    params: dict[str, np.ndarray],
    config: NetConfig,
    cache: dict,
    grad_o: np.ndarray,
) -> dict[str, np.ndarray]:
    """Exact gradients of sum(grad_o * o) with respect to every parameter.

    grad_o must be (B, T); entries at padded steps are zeroed internally.
    """
    h = cache["h"]
    B, T, H = h.shape
    if grad_o.shape != (B, T):
        raise ValueError(f"grad_o shape {grad_o.shape} does not match cache ({B}, {T})")
    lengths = cache["lengths"]
    mask = np.arange(T)[None, :] < lengths[:, None]
    grad_o = np.where(mask, grad_o, 0.0)

    gates, c, tanh_c, x, u = cache["gates"], cache["c"], cache["tanh_c"], cache["x"], cache["u"]
    wx, wh, v = params["lstm_wx"], params["lstm_wh"], params["out_v"]

    grads = {k: np.zeros_like(p) for k, p in params.items()}
    grads["out_v"] = np.einsum("bt,bth->h", grad_o, h)
    grads["out_b"] = np.array([grad_o.sum()])

    d_wx = grads["lstm_wx"]
    d_wh = grads["lstm_wh"]
    d_b = grads["lstm_b"]
    dx = np.empty((B, T, x.shape[2]))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        i = gates[:, t, :H]
        f = gates[:, t, H:2 * H]
        g = gates[:, t, 2 * H:3 * H]
        o_gate = gates[:, t, 3 * H:]
        c_prev = c[:, t - 1] if t > 0 else np.zeros((B, H))
        h_prev = h[:, t - 1] if t > 0 else np.zeros((B, H))

        dh = grad_o[:, t][:, None] * v[None, :] + dh_next
        do = dh * tanh_c[:, t]
        dc = dc_next + dh * o_gate * (1.0 - tanh_c[:, t] ** 2)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_next = dc * f

        dz = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g ** 2),
                do * o_gate * (1.0 - o_gate),
            ],
            axis=1,
        )  # (B, 4H)
        d_wx += dz.T @ x[:, t]
        d_wh += dz.T @ h_prev
        d_b += dz.sum(axis=0)
        dx[:, t] = dz @ wx
        dh_next = dz @ wh

    dpre = dx * (1.0 - x ** 2)  # through the fusion tanh
    grads["fusion_w"] = np.einsum("btf,btd->fd", dpre, u)
    grads["fusion_b"] = dpre.sum(axis=(0, 1))
    du = dpre @ params["fusion_w"]  # (B, T, D)

    offset = 0
    for k, name in enumerate(config.discrete_features):
        dim = config.embedding_dims[k]
        seg = du[:, :, offset:offset + dim].reshape(-1, dim)
        np.add.at(grads[f"emb_{name}"], cache["disc"][:, :, k].ravel(), seg)
        offset += dim
    return grads


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def apply_update_with_norm_projection(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = 5.0,
) -> dict[str, np.ndarray]:
    """Adam step with global-norm clipping; embedding rows re-projected to
    unit norm afterwards. Updates params in place and returns them."""
    scale = 1.0
    if clip_norm is not None:
        norm = global_grad_norm(grads)
        if norm > clip_norm:
            scale = clip_norm / norm
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for key in sorted(params):
        g = grads[key] * scale
        m = state.m[key]
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[key] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if key.startswith("emb_"):
            params[key] = _normalize_rows(params[key])
    return params


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    config: NetConfig,
    state: AdamState | None = None,
    extra: dict | None = None,
) -> None:
    """Persist named tensors, optimizer state, and metadata to one .npz file."""
    arrays: dict[str, np.ndarray] = {}
    for k, p in params.items():
        arrays[f"param::{k}"] = p
    if state is not None:
        for k in params:
            arrays[f"adam_m::{k}"] = state.m[k]
            arrays[f"adam_v::{k}"] = state.v[k]
    meta = {
        "version": CHECKPOINT_VERSION,
        "net_config": config.to_dict(),
        "adam_step": state.step if state is not None else None,
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(Path(path), **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], NetConfig, AdamState | None, dict]:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["meta"].tobytes()).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise NumericalError(f"unsupported checkpoint version {meta['version']}")
        params = {
            k.split("::", 1)[1]: data[k].copy() for k in data.files if k.startswith("param::")
        }
        state = None
        if meta["adam_step"] is not None:
            state = AdamState(
                step=int(meta["adam_step"]),
                m={k.split("::", 1)[1]: data[k].copy() for k in data.files if k.startswith("adam_m::")},
                v={k.split("::", 1)[1]: data[k].copy() for k in data.files if k.startswith("adam_v::")},
            )
    config = NetConfig.from_dict(meta["net_config"])
    return params, config, state, meta["extra"]

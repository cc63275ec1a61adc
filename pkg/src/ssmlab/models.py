"""Byte-level language models built from recurrent blocks.

Every variant shares the same skeleton: token embedding, N blocks of
(pre-norm -> sequence mixer -> residual, pre-norm -> pointwise MLP ->
residual), final norm, projection to 256 logits. The sequence mixer is the
diagonal SSM by default; 'gated' swaps in the input-dependent variant, 'rnn'
a tanh recurrence, 'gru' a standard GRU. The block internals are deliberately
plain so that any difference in length behavior is attributable to the
hidden-state carry policy, not architecture tricks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import ndcore as nd
from . import ssm
from .ndcore import Tensor


CHECKPOINT_MAGIC = b"SSMLABCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str = "ssm"  # ssm | gated | rnn | gru
    n_layers: int = 2
    d_model: int = 128
    m: int = 64
    vocab: int = 256
    mlp_ratio: int = 4
    ssm_activation: str = "identity"
    use_norm: bool = True
    use_mlp: bool = True
    tie_embeddings: bool = False
    decay_range: tuple = (0.9, 0.999)
    embed_scale: float = 0.02
    # stress-test overrides; None means normal initialization
    forced_decay: float | None = None
    readout_scale: float | None = None

    def validate(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.kind not in ("ssm", "gated", "rnn", "gru"):
            raise ValueError(f"unknown model kind {self.kind!r}")


PRESETS = {
    "tiny": ModelConfig(kind="ssm", n_layers=2, d_model=128, m=64),
    "small": ModelConfig(kind="ssm", n_layers=6, d_model=256, m=128),
    "micro": ModelConfig(kind="ssm", n_layers=2, d_model=16, m=8),
}


def config_from_preset(name_or_cfg) -> ModelConfig:
    if isinstance(name_or_cfg, ModelConfig):
        return name_or_cfg
    if name_or_cfg in PRESETS:
        cfg = PRESETS[name_or_cfg]
        return ModelConfig(**asdict(cfg))
    raise ValueError(f"unknown model preset {name_or_cfg!r}")


class LanguageModel:
    """Token-level LM over a 256-symbol byte alphabet.

    Parameters live in ``self.params`` keyed by dotted names; training
    rebinds entries with fresh tensors rather than mutating arrays in place.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.train_T: int | None = None  # recorded by training for eval defaults
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}
        d, V = cfg.d_model, cfg.vocab

        p["embed"] = Tensor(rng.normal(0.0, cfg.embed_scale, size=(V, d)), requires_grad=True)
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}"
            if cfg.use_norm:
                p[f"{pre}.norm1.g"] = nd.ones((d,), requires_grad=True)
                p[f"{pre}.norm1.b"] = nd.zeros((d,), requires_grad=True)
            self._init_mixer(p, pre, rng)
            if cfg.use_mlp:
                hid = cfg.mlp_ratio * d
                if cfg.use_norm:
                    p[f"{pre}.norm2.g"] = nd.ones((d,), requires_grad=True)
                    p[f"{pre}.norm2.b"] = nd.zeros((d,), requires_grad=True)
                p[f"{pre}.mlp.w1"] = Tensor(rng.normal(0, 1 / np.sqrt(d), size=(d, hid)), requires_grad=True)
                p[f"{pre}.mlp.b1"] = nd.zeros((hid,), requires_grad=True)
                p[f"{pre}.mlp.w2"] = Tensor(rng.normal(0, 1 / np.sqrt(hid), size=(hid, d)), requires_grad=True)
                p[f"{pre}.mlp.b2"] = nd.zeros((d,), requires_grad=True)
        if cfg.use_norm:
            p["final_norm.g"] = nd.ones((d,), requires_grad=True)
            p["final_norm.b"] = nd.zeros((d,), requires_grad=True)
        if not cfg.tie_embeddings:
            scale = cfg.readout_scale if cfg.readout_scale is not None else 1 / np.sqrt(d)
            p["head"] = Tensor(rng.normal(0, scale, size=(d, V)), requires_grad=True)
        self.params = p

    # -- parameter plumbing -------------------------------------------------
    def _init_mixer(self, p: dict, pre: str, rng: np.random.Generator):
        cfg = self.cfg
        d, m = cfg.d_model, cfg.m
        kind = cfg.kind
        if kind == "ssm":
            layer = ssm.init_ssm_params(rng, m, d, d, activation=cfg.ssm_activation,
                                        decay_range=cfg.decay_range)
            if cfg.forced_decay is not None:
                theta = np.log(-np.log(cfg.forced_decay))
                layer.log_neg_decay = Tensor(np.full(m, theta), requires_grad=True)
            if cfg.readout_scale is not None:
                layer.C = Tensor(rng.normal(0, cfg.readout_scale, size=(d, m)), requires_grad=True)
            p[f"{pre}.ssm.log_neg_decay"] = layer.log_neg_decay
            p[f"{pre}.ssm.U"] = layer.U
            p[f"{pre}.ssm.b"] = layer.b
            p[f"{pre}.ssm.C"] = layer.C
        elif kind == "gated":
            layer = ssm.init_gated_params(rng, m, d, activation=cfg.ssm_activation)
            for name in ("P", "r", "B", "c", "C"):
                p[f"{pre}.gated.{name}"] = getattr(layer, name)
        elif kind in ("rnn", "gru"):
            sd_d, sd_m = 1 / np.sqrt(d), 1 / np.sqrt(m)
            gates = ("",) if kind == "rnn" else ("z", "r", "h")
            for gname in gates:
                suffix = f".{gname}" if gname else ""
                p[f"{pre}.cell.Wh{suffix}"] = Tensor(rng.normal(0, sd_m, size=(m, m)), requires_grad=True)
                p[f"{pre}.cell.Wx{suffix}"] = Tensor(rng.normal(0, sd_d, size=(m, d)), requires_grad=True)
                p[f"{pre}.cell.b{suffix}"] = nd.zeros((m,), requires_grad=True)
            p[f"{pre}.cell.C"] = Tensor(rng.normal(0, sd_m, size=(d, m)), requires_grad=True)

    def _ssm_layer(self, i: int) -> ssm.SsmLayerParams:
        p = self.params
        return ssm.SsmLayerParams(
            log_neg_decay=p[f"blocks.{i}.ssm.log_neg_decay"],
            U=p[f"blocks.{i}.ssm.U"], b=p[f"blocks.{i}.ssm.b"],
            C=p[f"blocks.{i}.ssm.C"], activation=self.cfg.ssm_activation)

    def _gated_layer(self, i: int) -> ssm.GatedSsmParams:
        p = self.params
        pre = f"blocks.{i}.gated"
        return ssm.GatedSsmParams(P=p[f"{pre}.P"], r=p[f"{pre}.r"], B=p[f"{pre}.B"],
                                  c=p[f"{pre}.c"], C=p[f"{pre}.C"],
                                  activation=self.cfg.ssm_activation)

    def state_shape(self, B: int) -> tuple:
        if self.cfg.kind == "gated":
            return (B, self.cfg.m, self.cfg.d_model)
        return (B, self.cfg.m)

    def state_shapes(self, B: int) -> list[tuple]:
        return [self.state_shape(B)] * self.cfg.n_layers

    def init_states(self, B: int) -> list[Tensor]:
        return [nd.zeros(self.state_shape(B)) for _ in range(self.cfg.n_layers)]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # -- forward --------------------------------------------------------------
    def _norm(self, x: Tensor, g: Tensor, b: Tensor) -> Tensor:
        return nd.layer_norm(x, g, b, eps=1e-6)

    def forward(self, tokens: np.ndarray, h0: list[Tensor] | None = None,
                scan_path: str = "scan", collect_state_stats: bool = False):
        """tokens (B, T) -> (logits (B, T, vocab), final states per layer, stats).

        Logits at position k depend only on tokens <= k and the initial
        states. Raises OverflowDetected (with layer and step) when a layer's
        hidden states stop being finite.
        """
        cfg = self.cfg
        B, T = tokens.shape
        if h0 is None:
            h0 = self.init_states(B)
        x = nd.take_rows(self.params["embed"], tokens)  # (B, T, d)
        x = x.swapaxes(0, 1)  # (T, B, d)
        finals = []
        stats = []
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}"
            resid = x
            u = self._norm(x, self.params[f"{pre}.norm1.g"], self.params[f"{pre}.norm1.b"]) \
                if cfg.use_norm else x
            if cfg.kind == "ssm":
                y, hs = ssm.run_layer(self._ssm_layer(i), u, h0[i], path=scan_path)
            elif cfg.kind == "gated":
                y, hs = ssm.run_layer(self._gated_layer(i), u, h0[i], path=scan_path)
            else:
                y, hs = self._recurrent_layer(i, u, h0[i])
            if not hs.all_finite():
                bad = np.where(~np.isfinite(hs.data).reshape(T, -1).all(axis=1))[0]
                raise nd.OverflowDetected(
                    f"non-finite hidden state in layer {i}",
                    layer=i, step=int(bad[0]) if bad.size else -1)
            if collect_state_stats:
                stats.append(float(np.abs(hs.data).max()))
            finals.append(hs[T - 1])
            x = resid + y
            if cfg.use_mlp:
                h = self._norm(x, self.params[f"{pre}.norm2.g"], self.params[f"{pre}.norm2.b"]) \
                    if cfg.use_norm else x
                h = nd.gelu(h @ self.params[f"{pre}.mlp.w1"] + self.params[f"{pre}.mlp.b1"])
                x = x + (h @ self.params[f"{pre}.mlp.w2"] + self.params[f"{pre}.mlp.b2"])
        if cfg.use_norm:
            x = self._norm(x, self.params["final_norm.g"], self.params["final_norm.b"])
        if cfg.tie_embeddings:
            logits = x @ self.params["embed"].swapaxes(0, 1)
        else:
            logits = x @ self.params["head"]
        return logits.swapaxes(0, 1), finals, stats

    def _recurrent_layer(self, i: int, u: Tensor, h0: Tensor):
        """Sequential tanh-RNN or GRU over (T, B, d) inputs."""
        p = self.params
        pre = f"blocks.{i}.cell"
        T = u.shape[0]
        h = h0
        hs = []
        if self.cfg.kind == "rnn":
            Wh, Wx, b = p[f"{pre}.Wh"], p[f"{pre}.Wx"], p[f"{pre}.b"]
            for k in range(T):
                h = nd.tanh(h @ Wh.swapaxes(0, 1) + u[k] @ Wx.swapaxes(0, 1) + b)
                hs.append(h)
        else:
            for k in range(T):
                xk = u[k]
                z = nd.sigmoid(h @ p[f"{pre}.Wh.z"].swapaxes(0, 1) + xk @ p[f"{pre}.Wx.z"].swapaxes(0, 1) + p[f"{pre}.b.z"])
                r = nd.sigmoid(h @ p[f"{pre}.Wh.r"].swapaxes(0, 1) + xk @ p[f"{pre}.Wx.r"].swapaxes(0, 1) + p[f"{pre}.b.r"])
                cand = nd.tanh((r * h) @ p[f"{pre}.Wh.h"].swapaxes(0, 1) + xk @ p[f"{pre}.Wx.h"].swapaxes(0, 1) + p[f"{pre}.b.h"])
                h = (1.0 - z) * h + z * cand
                hs.append(h)
        stacked = nd.stack(hs, axis=0)
        y = stacked @ p[f"{pre}.C"].swapaxes(0, 1)
        return y, stacked

    # -- persistence -------------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, self, extra=extra)


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; tests pin it against the live model."""
    d, m, V, N = cfg.d_model, cfg.m, cfg.vocab, cfg.n_layers
    total = V * d  # embedding
    if cfg.kind == "ssm":
        mixer = m + m * d + m + d * m
    elif cfg.kind == "gated":
        mixer = 5 * m * d
    elif cfg.kind == "rnn":
        mixer = m * m + m * d + m + d * m
    else:  # gru
        mixer = 3 * (m * m + m * d + m) + d * m
    per_block = mixer
    if cfg.use_norm:
        per_block += 2 * d
    if cfg.use_mlp:
        hid = cfg.mlp_ratio * d
        per_block += d * hid + hid + hid * d + d
        if cfg.use_norm:
            per_block += 2 * d
    total += N * per_block
    if cfg.use_norm:
        total += 2 * d
    if not cfg.tie_embeddings:
        total += d * V
    return total


# ---------------------------------------------------------------------------
# checkpoint format
#
# All integers little-endian. Layout:
#   8 bytes   magic "SSMLABCK"
#   u32       version (currently 1)
#   u8        dtype flag: 0 = float64, 1 = float32
#   u32       length of config JSON, then that many UTF-8 bytes
#   u32       number of tensors
#   per tensor:
#     u16     name length, then UTF-8 name
#     u8      ndim, then ndim * u32 dims
#     raw     row-major (C order) float data in the file dtype

def save_checkpoint(path, model: LanguageModel, extra: dict | None = None) -> None:
    cfg_doc = {"model": asdict(model.cfg), "train_T": model.train_T}
    if extra:
        cfg_doc.update(extra)
    cfg_json = json.dumps(cfg_doc, sort_keys=True).encode("utf-8")
    dtype_flag = 1 if nd.dtype_name() == "float32" else 0
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IB", CHECKPOINT_VERSION, dtype_flag))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            t = model.params[name]
            nm = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nm)))
            fh.write(nm)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data).tobytes())


def load_checkpoint(path) -> tuple[LanguageModel, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"not a checkpoint file (magic {magic!r})")
        version, dtype_flag = struct.unpack("<IB", fh.read(5))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        cfg_doc = json.loads(fh.read(cfg_len).decode("utf-8"))
        dtype = np.float32 if dtype_flag == 1 else np.float64
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(fh.read(count * dtype().itemsize), dtype=dtype).copy()
            tensors[name] = data.reshape(dims)
    model_cfg = cfg_doc["model"]
    model_cfg["decay_range"] = tuple(model_cfg["decay_range"])
    cfg = ModelConfig(**model_cfg)
    model = LanguageModel(cfg, seed=0)
    if set(tensors) != set(model.params):
        missing = set(model.params) ^ set(tensors)
        raise CheckpointError(f"checkpoint parameters do not match config: {sorted(missing)}")
    for name, arr in tensors.items():
        model.params[name] = Tensor(arr, requires_grad=True)
    model.train_T = cfg_doc.get("train_T")
    return model, cfg_doc

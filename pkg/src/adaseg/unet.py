"""Small U-Net for binary segmentation, trained with Adam on pixelwise BCE."""

from __future__ import annotations

import io
import os
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tape, Tensor

CKPT_MAGIC = b"ADAC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class UNetConfig:
    n: int = 64
    base_channels: int = 8
    kernel_size: int = 3
    depth: int = 3
    dropout: float = 0.5
    bn_momentum: float = 0.4

    def validate(self) -> "UNetConfig":
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.n <= 0 or self.n % (2 ** self.depth):
            raise ValueError(f"input size n={self.n} must be divisible by 2**depth={2 ** self.depth}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 <= self.bn_momentum <= 1.0:
            raise ValueError("bn_momentum must lie in [0, 1]")
        return self


def block_layout(config: UNetConfig) -> list[tuple[str, int, int]]:
    """(block id, in channels, out channels) for every double-conv block, in execution order."""
    b, d = config.base_channels, config.depth
    blocks = []
    cin = 1
    for i in range(d):
        cout = b * 2 ** i
        blocks.append((f"enc{i + 1}", cin, cout))
        cin = cout
    blocks.append(("bottleneck", cin, b * 2 ** d))
    cin = b * 2 ** d
    for i in reversed(range(d)):
        cout = b * 2 ** i
        blocks.append((f"dec{i + 1}", cin + cout, cout))
        cin = cout
    return blocks


def parameter_count(config: UNetConfig) -> int:
    """Closed-form count of trainable scalars."""
    k2 = config.kernel_size ** 2
    total = 0
    for _, cin, cout in block_layout(config):
        total += (cin * cout * k2 + cout) + (cout * cout * k2 + cout)  # two convs
        total += 2 * 2 * cout  # two batchnorms (gamma, beta)
    total += config.base_channels + 1  # 1x1 head
    return total


class UNet:
    """Parameters, running statistics and the forward pass.

    ``params`` maps names such as ``enc1.conv1.weight`` to trainable tensors;
    ``bn_states`` holds running statistics keyed by batchnorm id.
    """

    cam_layer = "bottleneck"

    def __init__(self, config: UNetConfig, params: dict[str, Tensor], bn_states: dict[str, BatchNormState]):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self.epochs_trained = 0

    @property
    def layer_ids(self) -> list[str]:
        return ["input"] + [b for b, _, _ in block_layout(self.config)] + ["logits"]

    def _block(self, x: Tensor, bid: str, training: bool, rng) -> Tensor:
        p, cfg = self.params, self.config
        pad = cfg.kernel_size // 2
        for j in (1, 2):
            x = T.conv2d(x, p[f"{bid}.conv{j}.weight"], p[f"{bid}.conv{j}.bias"], padding=pad)
            x = T.batchnorm(x, p[f"{bid}.bn{j}.gamma"], p[f"{bid}.bn{j}.beta"],
                            self.bn_states[f"{bid}.bn{j}"], cfg.bn_momentum, training)
            x = T.relu(x)
            x = T.dropout(x, cfg.dropout, training, rng)
        return T.mark(bid, x)

    def forward(self, images, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Pre-sigmoid logits ``[B,1,n,n]`` for images ``[B,1,n,n]``."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=T.DTYPE))
        n = self.config.n
        if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (n, n):
            raise T.TensorError(f"expected images of shape [B,1,{n},{n}], got {x.shape}")
        T.mark("input", x)
        skips = []
        d = self.config.depth
        for i in range(d):
            x = self._block(x, f"enc{i + 1}", training, rng)
            skips.append(x)
            x = T.maxpool2(x)
        x = self._block(x, "bottleneck", training, rng)
        for i in reversed(range(d)):
            x = T.upsample_nearest2(x)
            x = T.concat_channels(x, skips[i])
            x = self._block(x, f"dec{i + 1}", training, rng)
        x = T.conv2d(x, self.params["head.weight"], self.params["head.bias"], padding=0)
        return T.mark("logits", x)

    def predict_proba(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        images = _as_batch(images)
        outs = []
        for s in range(0, len(images), batch_size):
            logits = self.forward(images[s:s + batch_size], training=False)
            outs.append(T._stable_sigmoid(logits.data))
        return np.concatenate(outs, axis=0)[:, 0]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        for bid, st in self.bn_states.items():
            out[f"{bid}.running_mean"] = st.mean
            out[f"{bid}.running_var"] = st.var
        return out

    def copy(self) -> "UNet":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        states = {}
        for k, st in self.bn_states.items():
            s = BatchNormState(len(st.mean))
            s.mean[...] = st.mean
            s.var[...] = st.var
            states[k] = s
        out = UNet(self.config, params, states)
        out.epochs_trained = self.epochs_trained
        return out


def _as_batch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=T.DTYPE)
    if images.ndim == 2:
        images = images[None, None]
    elif images.ndim == 3:
        images = images[:, None]
    return images


def build_unet(config: UNetConfig, rng: np.random.Generator) -> UNet:
    """He-initialised U-Net; biases, betas zero and gammas one."""
    config.validate()
    k = config.kernel_size
    params: dict[str, Tensor] = {}
    states: dict[str, BatchNormState] = {}

    def conv(name, cin, cout, ksize):
        fan_in = cin * ksize * ksize
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, ksize, ksize)).astype(T.DTYPE)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(cout, T.DTYPE), requires_grad=True, name=f"{name}.bias")

    for bid, cin, cout in block_layout(config):
        for j, ci in ((1, cin), (2, cout)):
            conv(f"{bid}.conv{j}", ci, cout, k)
            params[f"{bid}.bn{j}.gamma"] = Tensor(np.ones(cout, T.DTYPE), requires_grad=True)
            params[f"{bid}.bn{j}.beta"] = Tensor(np.zeros(cout, T.DTYPE), requires_grad=True)
            states[f"{bid}.bn{j}"] = BatchNormState(cout)
    conv("head", config.base_channels, 1, 1)
    return UNet(config, params, states)


def bce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean pixelwise binary cross-entropy on probabilities clamped to [1e-7, 1-1e-7]."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise T.TensorError(f"bce_loss: prediction shape {pred.shape} != target shape {target.shape}")
    p = T.clip(pred, 1e-7, 1 - 1e-7)
    ll = T.add(T.mul(Tensor(target), T.log(p)),
               T.mul(Tensor(1 - target), T.log(T.add(Tensor(np.ones_like(target)), T.scale(p, -1.0)))))
    return T.scale(T.mean_all(ll), -1.0)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[dict] = None
    v: Optional[dict] = None


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place."""
    if state.m is None:
        state.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        state.v = {k: np.zeros_like(p.data) for k, p in params.items()}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return state


def train_step(model: UNet, state: AdamState, images: np.ndarray, masks: np.ndarray,
               rng: np.random.Generator) -> float:
    x = Tensor(_as_batch(images))
    y = np.asarray(masks, dtype=T.DTYPE).reshape(x.shape)
    with Tape():
        logits = model.forward(x, training=True, rng=rng)
        loss = bce_loss(T.sigmoid(logits), y)
    T.backward(loss)
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    adam_step(model.params, grads, state)
    for p in model.params.values():
        p.grad = None
    return float(loss.data)


def train_epoch(model: UNet, state: AdamState, images: np.ndarray, masks: np.ndarray,
                batch_size: int = 16, rng: Optional[np.random.Generator] = None) -> float:
    """One shuffled pass over the data; returns the mean of the batch losses."""
    if len(images) == 0:
        raise ValueError("train_epoch: empty dataset")
    if rng is None:
        rng = np.random.default_rng(0)
    order = rng.permutation(len(images))
    losses = []
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        losses.append(train_step(model, state, images[idx], masks[idx], rng))
    return float(np.mean(losses))


def predict_mask(model: UNet, images: np.ndarray) -> np.ndarray:
    """Eval-mode forward thresholded at 0.5, inclusive on the foreground side."""
    return (model.predict_proba(images) >= 0.5).astype(np.uint8)


# ---------------------------------------------------------------- checkpoints


def _write_entry(buf: io.BytesIO, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr).tobytes())


def checkpoint_bytes(model: UNet, state: Optional[AdamState] = None) -> bytes:
    entries: list[tuple[str, np.ndarray]] = []
    for key, val in asdict(model.config).items():
        entries.append((f"config/{key}", np.array(val, dtype=np.float32)))
    entries.append(("meta/epochs", np.array(model.epochs_trained, dtype=np.float32)))
    entries.extend(model.state_arrays().items())
    if state is not None:
        for key in ("lr", "beta1", "beta2", "eps", "t"):
            entries.append((f"adam/{key}", np.array(getattr(state, key), dtype=np.float32)))
        if state.m is not None:
            for name in model.params:
                entries.append((f"adam/m/{name}", state.m[name]))
                entries.append((f"adam/v/{name}", state.v[name]))
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(entries)))
    for name, arr in entries:
        _write_entry(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(model: UNet, state: Optional[AdamState], path) -> None:
    data = checkpoint_bytes(model, state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _parse_entries(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    entries = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CheckpointError("truncated entry name")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(data):
                raise CheckpointError(f"truncated payload for entry {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
            entries[name] = arr
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(data):
        raise CheckpointError("trailing bytes after last entry")
    return entries


def load_checkpoint(path) -> tuple[UNet, Optional[AdamState]]:
    with open(path, "rb") as fh:
        entries = _parse_entries(fh.read())
    cfg_fields = {k[len("config/"):]: float(v) for k, v in entries.items() if k.startswith("config/")}
    try:
        config = UNetConfig(
            n=int(cfg_fields["n"]), base_channels=int(cfg_fields["base_channels"]),
            kernel_size=int(cfg_fields["kernel_size"]), depth=int(cfg_fields["depth"]),
            dropout=float(np.float32(cfg_fields["dropout"])), bn_momentum=float(np.float32(cfg_fields["bn_momentum"])),
        )
    except KeyError as exc:
        raise CheckpointError(f"missing config entry {exc}") from None
    model = build_unet(config, np.random.default_rng(0))
    for name, p in model.params.items():
        if name not in entries or entries[name].shape != p.shape:
            raise CheckpointError(f"missing or mis-shaped parameter {name!r}")
        p.data = entries[name].copy()
    for bid, st in model.bn_states.items():
        st.mean[...] = entries[f"{bid}.running_mean"]
        st.var[...] = entries[f"{bid}.running_var"]
    model.epochs_trained = int(entries.get("meta/epochs", 0))
    state = None
    if "adam/t" in entries:
        state = AdamState(lr=float(entries["adam/lr"]), beta1=float(entries["adam/beta1"]),
                          beta2=float(entries["adam/beta2"]), eps=float(entries["adam/eps"]),
                          t=int(entries["adam/t"]))
        if f"adam/m/{next(iter(model.params))}" in entries:
            state.m = {k: entries[f"adam/m/{k}"].copy() for k in model.params}
            state.v = {k: entries[f"adam/v/{k}"].copy() for k in model.params}
    return model, state

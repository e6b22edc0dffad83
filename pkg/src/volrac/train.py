"""Supervised training on (corrupted, clean) volume pairs.

Gradients come from the reverse-mode engine in :mod:`volrac.autodiff`; the
optimizer is bias-corrected Adam with optional gradient accumulation. The
driver splits the dataset, corrupts training samples freshly every epoch
(unless frozen), and logs ``step  train_loss  test_psnr  test_ssim`` lines.
All randomness is derived from per-purpose seed sequences so a run is a pure
function of (dataset, configs, seeds) and resuming is bit-exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .artifacts import ArtifactConfig, bernoulli_process
from .autodiff import Tensor
from .metrics import psnr, ssim3
from .model import ModelConfig, ModelParams, _forward_cells, forward, init_params, save_checkpoint
from .volume import Volume, patchify

OPT_MAGIC = b"G2LO"
OPT_VERSION = 1

LOSS_KINDS = ("squared", "absolute")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    accumulation_steps: int = 8

    def __post_init__(self):
        # lr = 0 is allowed: it freezes parameters, which the training
        # determinism contract relies on.
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")


@dataclass
class OptimizerState:
    """Per-parameter first/second moment accumulators plus the step counter."""

    m: dict
    v: dict
    t: int = 0


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "squared"
    batch_size: int = 2  # per micro-batch; one step consumes batch_size * accumulation_steps pairs
    max_steps: int = 2000
    seed: int = 0
    split: float = 0.8
    eval_interval: int = 50
    freeze_corruption: bool = False

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}")
        if not (0.0 < self.split < 1.0):
            raise ValueError("split fraction must lie strictly between 0 and 1")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_interval < 1:
            raise ValueError("batch size and eval interval must be >= 1, steps >= 0")


def init_opt_state(params: ModelParams) -> OptimizerState:
    m = {name: np.zeros_like(t.data) for name, t in params.named_tensors()}
    v = {name: np.zeros_like(t.data) for name, t in params.named_tensors()}
    return OptimizerState(m=m, v=v, t=0)


# -- loss and gradients ---------------------------------------------------------------


def _loss_tensor(pred: Tensor, target: np.ndarray, kind: str) -> Tensor:
    gap = ad.sub(pred, Tensor(target))
    if kind == "squared":
        return ad.mean(ad.square(gap))
    if kind == "absolute":
        return ad.mean(ad.absolute(gap))
    raise ValueError(f"loss kind must be one of {LOSS_KINDS}")


def loss(pred: Volume, target: Volume, kind: str = "squared") -> float:
    """Mean voxelwise squared or absolute error."""
    if pred.side != target.side:
        raise ValueError(f"volume sides differ: {pred.side} vs {target.side}")
    gap = pred.data.astype(np.float64) - target.data.astype(np.float64)
    if kind == "squared":
        return float(np.mean(gap * gap))
    if kind == "absolute":
        return float(np.mean(np.abs(gap)))
    raise ValueError(f"loss kind must be one of {LOSS_KINDS}")


def _patch_vectors(v: Volume, cfg: ModelConfig, dtype) -> np.ndarray:
    return patchify(v, cfg.patch).data.reshape(-1, cfg.patch**3).astype(dtype)


def loss_and_grad(
    x: np.ndarray, target: np.ndarray, params: ModelParams, kind: str = "squared"
) -> tuple[float, dict]:
    """Loss of forward(x) against target plus exact reverse-mode gradients for
    every parameter tensor, keyed by declaration name. Arrays are flat
    (N, P**3) patch-vector matrices in the parameter dtype."""
    params.zero_grad()
    pred = _forward_cells(Tensor(x), params)
    value = _loss_tensor(pred, target, kind)
    value.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.named_tensors()
    }
    return float(value.data), grads


def backward(x: Volume, target: Volume, params: ModelParams, kind: str = "squared") -> dict:
    """Gradients of loss(forward(x), target) w.r.t. all model parameters."""
    cfg = params.config
    dtype = params.h1_w.dtype
    _, grads = loss_and_grad(
        _patch_vectors(x, cfg, dtype), _patch_vectors(target, cfg, dtype), params, kind
    )
    return grads


# -- optimizer ------------------------------------------------------------------------


def adam_step(
    params: ModelParams, grads: dict, state: OptimizerState, cfg: OptimizerConfig
) -> tuple[ModelParams, OptimizerState]:
    """Standard bias-corrected Adam update (in place)."""
    state.t += 1
    t = state.t
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, tensor in params.named_tensors():
        g = grads[name]
        if g.shape != tensor.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        tensor.data = tensor.data - cfg.learning_rate * update
    return params, state


def _mean_grads(grad_list: list[dict]) -> dict:
    out = {}
    for name in grad_list[0]:
        acc = np.zeros_like(grad_list[0][name])
        for g in grad_list:
            acc += g[name]
        out[name] = acc / len(grad_list)
    return out


def accumulate_and_step(
    pairs: Sequence[tuple[Volume, Volume]],
    params: ModelParams,
    state: OptimizerState,
    opt_cfg: OptimizerConfig,
    loss_kind: str = "squared",
) -> tuple[ModelParams, OptimizerState, float]:
    """Average the gradients of per-micro-batch mean losses, then take one
    Adam step; equals the full-batch gradient of the mean loss."""
    n = len(pairs)
    k = opt_cfg.accumulation_steps
    if n == 0 or n % k != 0:
        raise ValueError(f"batch size {n} must be a positive multiple of accumulation_steps {k}")
    micro = n // k
    cfg = params.config
    dtype = params.h1_w.dtype

    micro_grads = []
    losses = []
    for i in range(k):
        chunk = pairs[i * micro : (i + 1) * micro]
        sample_grads = []
        for corrupted, clean in chunk:
            value, grads = loss_and_grad(
                _patch_vectors(corrupted, cfg, dtype),
                _patch_vectors(clean, cfg, dtype),
                params,
                loss_kind,
            )
            losses.append(value)
            sample_grads.append(grads)
        micro_grads.append(_mean_grads(sample_grads))
    total = _mean_grads(micro_grads)
    params, state = adam_step(params, total, state, opt_cfg)
    return params, state, float(np.mean(losses))


# -- optimizer-state file (sibling of the model checkpoint) -----------------------------


def save_opt_state(state: OptimizerState, params: ModelParams, path) -> None:
    buf = bytearray()
    buf += OPT_MAGIC
    buf += struct.pack("<I", OPT_VERSION)
    buf += struct.pack("<Q", state.t)
    for block in (state.m, state.v):
        for name, _ in params.named_tensors():
            flat = np.ascontiguousarray(block[name], dtype="<f4").reshape(-1)
            buf += struct.pack("<I", flat.size)
            buf += flat.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_opt_state(params: ModelParams, path) -> OptimizerState:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != OPT_MAGIC:
        raise ValueError(f"bad magic in optimizer state {path!s}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != OPT_VERSION:
        raise ValueError(f"optimizer-state version mismatch in {path!s}")
    (t,) = struct.unpack("<Q", raw[8:16])
    state = init_opt_state(params)
    offset = 16
    for block in (state.m, state.v):
        for name, tensor in params.named_tensors():
            (count,) = struct.unpack("<I", raw[offset : offset + 4])
            offset += 4
            if count != tensor.data.size:
                raise ValueError(f"moment length mismatch for {name} in {path!s}")
            end = offset + 4 * count
            block[name] = (
                np.frombuffer(raw[offset:end], dtype="<f4").reshape(tensor.data.shape).copy()
            )
            offset = end
    state.t = t
    return state


# -- training driver --------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    state: OptimizerState
    log_rows: list  # (step, train_loss, test_psnr, test_ssim)
    steps_done: int


def _corruption_seed(master: int, epoch: int, index: int) -> int:
    return int(np.random.default_rng([master & 0x7FFFFFFFFFFFFFFF, 1, epoch, index]).integers(2**62))


def _epoch_order(master: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([master & 0x7FFFFFFFFFFFFFFF, 2, epoch]).permutation(n)


def split_dataset(volumes: Sequence[Volume], split: float, seed: int) -> tuple[list, list]:
    """Deterministic shuffled split; both halves non-empty when possible."""
    n = len(volumes)
    if n == 0:
        raise ValueError("dataset is empty")
    order = np.random.default_rng([seed & 0x7FFFFFFFFFFFFFFF, 0]).permutation(n)
    n_train = max(1, min(n - 1, int(round(split * n)))) if n > 1 else 1
    train_idx = order[:n_train]
    test_idx = order[n_train:]
    return [volumes[i] for i in train_idx], [volumes[i] for i in test_idx]


def _training_pair(
    clean: Sequence[Volume], art_cfg: ArtifactConfig, tr_cfg: TrainConfig, k: int
) -> tuple[Volume, Volume]:
    """k-th element of the deterministic corrupted-pair stream."""
    n = len(clean)
    epoch = k // n
    pos = k % n
    idx = int(_epoch_order(tr_cfg.seed, epoch, n)[pos])
    target = clean[idx]
    eff_epoch = 0 if tr_cfg.freeze_corruption else epoch
    seed = _corruption_seed(tr_cfg.seed ^ art_cfg.seed, eff_epoch, idx)
    corrupted, _ = bernoulli_process(target, art_cfg, seed=seed)
    return corrupted, target


def train(
    volumes: Sequence[Volume],
    model_cfg: ModelConfig,
    opt_cfg: OptimizerConfig,
    train_cfg: TrainConfig,
    art_cfg: ArtifactConfig,
    out_dir,
    init: tuple[ModelParams, OptimizerState, int] | None = None,
) -> TrainResult:
    """Run (or resume) supervised training and write checkpoint + metric log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, test_set = split_dataset(volumes, train_cfg.split, train_cfg.seed)

    if init is None:
        params = init_params(model_cfg, seed=train_cfg.seed)
        state = init_opt_state(params)
        start_step = 0
    else:
        params, state, start_step = init

    # Test pairs are corrupted once, deterministically, for stable evaluation.
    test_pairs = []
    for i, target in enumerate(test_set):
        seed = _corruption_seed(train_cfg.seed ^ art_cfg.seed ^ 0x5EED, 0, i)
        corrupted, _ = bernoulli_process(target, art_cfg, seed=seed)
        test_pairs.append((corrupted, target))

    batch = train_cfg.batch_size * opt_cfg.accumulation_steps
    log_rows = []
    log_path = out_dir / "metrics.tsv"
    mode = "a" if start_step > 0 else "w"
    with open(log_path, mode) as log:
        for step in range(start_step, train_cfg.max_steps):
            pairs = [
                _training_pair(train_set, art_cfg, train_cfg, step * batch + j)
                for j in range(batch)
            ]
            params, state, train_loss = accumulate_and_step(
                pairs, params, state, opt_cfg, train_cfg.loss_kind
            )
            done = step + 1
            if done % train_cfg.eval_interval == 0 or done == train_cfg.max_steps:
                t_psnr, t_ssim = evaluate(params, test_pairs)
                row = (done, train_loss, t_psnr, t_ssim)
                log_rows.append(row)
                log.write(f"{done}\t{train_loss:.6e}\t{t_psnr:.4f}\t{t_ssim:.6f}\n")
                log.flush()
                save_checkpoint(params, out_dir / "model.g2lc")
                save_opt_state(state, params, out_dir / "optimizer.g2lo")

    save_checkpoint(params, out_dir / "model.g2lc")
    save_opt_state(state, params, out_dir / "optimizer.g2lo")
    return TrainResult(params=params, state=state, log_rows=log_rows, steps_done=train_cfg.max_steps)


def evaluate(params: ModelParams, pairs: Sequence[tuple[Volume, Volume]]) -> tuple[float, float]:
    """Mean test PSNR/SSIM of reconstructions against clean targets."""
    if not pairs:
        return float("nan"), float("nan")
    ps, ss = [], []
    for corrupted, clean in pairs:
        recon = forward(corrupted, params)
        recon = Volume(recon.side, np.clip(recon.data, 0.0, 1.0))
        ps.append(psnr(clean, recon))
        ss.append(ssim3(clean, recon))
    return float(np.mean(ps)), float(np.mean(ss))

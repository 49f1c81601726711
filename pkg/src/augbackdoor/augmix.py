"""AugMix-parameter gradient shaping: optimise per-example chain weights and the
mixing coefficient so an honestly-labeled augmented batch imitates the gradient
of an overtly backdoored batch.

Chains (discrete op sequences with their scalar parameters) are sampled once
and frozen; only the chain weights w (simplex, via softmax over free logits)
and mix coefficient m (unit interval, via sigmoid) are optimised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi
import torch
import torch.nn.functional as F

from .core import Batch, ConfigError, ContractViolation, RngStream
from .models import TrainingDiverged
from .trigger import TriggerPatch, badnet_batch

DEFAULT_OP_POOL = ("rotate", "shear", "translate", "posterize", "autocontrast")


# ---------------------------------------------------------------------------
# Chain ops: smooth image ops on (C, H, W) float arrays, parameters frozen at
# sample time. These are constants of the optimisation (no grad through them).

def _affine(arr: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    out = np.empty_like(arr)
    for c in range(arr.shape[0]):
        out[c] = ndi.affine_transform(arr[c], matrix, offset=offset, order=1,
                                      mode="constant", cval=0.0)
    return out


def _center_affine(arr: np.ndarray, matrix: np.ndarray, shift: np.ndarray | None = None) -> np.ndarray:
    h, w = arr.shape[-2:]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    if shift is not None:
        offset += shift
    return _affine(arr, matrix, offset)


def apply_chain_op(arr: np.ndarray, name: str, params: dict) -> np.ndarray:
    if name == "rotate":
        a = math.radians(params["angle"])
        mat = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        return _center_affine(arr, mat)
    if name == "shear":
        mat = np.array([[1.0, params["factor"]], [0.0, 1.0]])
        return _center_affine(arr, mat)
    if name == "translate":
        mat = np.eye(2)
        return _center_affine(arr, mat, shift=np.array([params["dy"], params["dx"]]))
    if name == "posterize":
        levels = params["levels"]
        quant = np.floor(arr * levels) / max(1, levels - 1)
        return 0.5 * (arr + np.clip(quant, 0.0, 1.0))
    if name == "autocontrast":
        lo, hi = arr.min(), arr.max()
        stretched = (arr - lo) / (hi - lo + 1e-6)
        return 0.5 * (arr + stretched)
    raise ConfigError(f"unknown chain op: {name!r}")


def apply_chain(arr: np.ndarray, ops: list[tuple[str, dict]]) -> np.ndarray:
    for name, params in ops:
        arr = apply_chain_op(arr, name, params)
    return np.clip(arr, 0.0, 1.0)


def _sample_op(name: str, gen: np.random.Generator) -> tuple[str, dict]:
    if name == "rotate":
        return name, {"angle": float(gen.uniform(-30.0, 30.0))}
    if name == "shear":
        return name, {"factor": float(gen.uniform(-0.3, 0.3))}
    if name == "translate":
        return name, {"dx": float(gen.uniform(-4.0, 4.0)), "dy": float(gen.uniform(-4.0, 4.0))}
    if name == "posterize":
        return name, {"levels": int(gen.integers(3, 7))}
    if name == "autocontrast":
        return name, {}
    raise ConfigError(f"unknown chain op: {name!r}")


@dataclass
class ChainSet:
    """Frozen augmentation chains, one list of `width` chains per example."""

    ops: list[list[list[tuple[str, dict]]]]   # [example][chain] -> op sequence
    _rendered: torch.Tensor | None = field(default=None, repr=False)

    @property
    def width(self) -> int:
        return len(self.ops[0])

    def render(self, images: torch.Tensor) -> torch.Tensor:
        """Chain outputs as a constant tensor (N, width, C, H, W); cached."""
        if self._rendered is None or self._rendered.shape[0] != images.shape[0]:
            arrs = images.detach().numpy().astype(np.float64)
            out = np.empty((images.shape[0], self.width) + arrs.shape[1:], dtype=np.float32)
            for i, chains in enumerate(self.ops):
                for j, chain in enumerate(chains):
                    out[i, j] = apply_chain(arrs[i], chain)
            self._rendered = torch.from_numpy(out)
        return self._rendered


def sample_chains(
    batch: Batch,
    width: int,
    depth: int,
    op_pool: tuple[str, ...] = DEFAULT_OP_POOL,
    rng: RngStream | None = None,
) -> ChainSet:
    """Draw and freeze chains: each chain is a sequence of up to `depth` ops with
    their scalar parameters fixed; depth 0 means every chain is the identity."""
    if not op_pool:
        raise ConfigError("op pool must be nonempty")
    rng = rng or RngStream(0, "chains")
    all_ops = []
    for i in range(len(batch)):
        gen = rng.fork(i).gen
        chains = []
        for _ in range(width):
            length = int(gen.integers(1, depth + 1)) if depth > 0 else 0
            chains.append([_sample_op(op_pool[gen.integers(0, len(op_pool))], gen)
                           for _ in range(length)])
        all_ops.append(chains)
    return ChainSet(ops=all_ops)


# ---------------------------------------------------------------------------
# Differentiable parameters

class AugMixParams:
    """Per-example chain weights (simplex) and mix coefficient (unit interval),
    stored as unconstrained logits so plain gradient steps stay admissible."""

    def __init__(self, weight_logits: torch.Tensor, mix_logits: torch.Tensor):
        if weight_logits.shape[0] != mix_logits.shape[0]:
            raise ContractViolation("weight and mix parameter batch sizes differ")
        self.weight_logits = weight_logits
        self.mix_logits = mix_logits

    @property
    def weights(self) -> torch.Tensor:
        return F.softmax(self.weight_logits, dim=1)

    @property
    def mix(self) -> torch.Tensor:
        return torch.sigmoid(self.mix_logits)

    def free_parameters(self) -> list[torch.Tensor]:
        return [self.weight_logits, self.mix_logits]

    def requires_grad_(self, flag: bool = True) -> "AugMixParams":
        self.weight_logits.requires_grad_(flag)
        self.mix_logits.requires_grad_(flag)
        return self

    def detach(self) -> "AugMixParams":
        return AugMixParams(self.weight_logits.detach().clone(), self.mix_logits.detach().clone())


_EPS = 1e-7


def sample_params(batch_size: int, width: int, alpha: float, rng: RngStream) -> AugMixParams:
    """Dirichlet(1) rows for w and Beta(alpha, alpha) for m, stored as logits."""
    if width < 1:
        raise ConfigError("width must be >= 1")
    w = rng.gen.dirichlet(np.ones(width), size=batch_size)
    m = rng.gen.beta(alpha, alpha, size=batch_size)
    w = np.clip(w, _EPS, 1.0)
    m = np.clip(m, _EPS, 1.0 - _EPS)
    weight_logits = torch.from_numpy(np.log(w)).float()
    mix_logits = torch.from_numpy(np.log(m) - np.log1p(-m)).float()
    return AugMixParams(weight_logits, mix_logits)


def augmix_images(images: torch.Tensor, chains: ChainSet, params: AugMixParams) -> torch.Tensor:
    """x_out = m*x + (1-m) * sum_i w_i * chain_i(x); differentiable in w and m."""
    rendered = chains.render(images)            # (N, width, C, H, W), constant
    w = params.weights.view(*params.weights.shape, 1, 1, 1)
    mixed = (w * rendered).sum(dim=1)
    m = params.mix.view(-1, 1, 1, 1)
    return m * images + (1.0 - m) * mixed


def augmix_apply(batch: Batch, chains: ChainSet, params: AugMixParams) -> Batch:
    """Apply AugMix with the given parameters; labels pass through unchanged."""
    images = augmix_images(batch.images, chains, params)
    return Batch(images, batch.labels.clone(), list(batch.provenance))


# ---------------------------------------------------------------------------
# Gradient matching

def gradient_of_batch(model: torch.nn.Module, batch: Batch, create_graph: bool = False,
                      loss_fn=None) -> torch.Tensor:
    """Flattened gradient of the mean loss (cross-entropy by default) w.r.t. all
    model parameters, in a fixed canonical order."""
    loss_fn = loss_fn or F.cross_entropy
    loss = loss_fn(model(batch.images), batch.labels)
    if not torch.isfinite(loss):
        raise TrainingDiverged("non-finite loss in gradient computation")
    params = [p for p in model.parameters()]
    grads = torch.autograd.grad(loss, params, create_graph=create_graph)
    return torch.cat([g.reshape(-1) for g in grads])


def _badnet_selection(n: int, p: float, rng: RngStream) -> torch.Tensor:
    """Per-example coin flips choosing which reference-batch examples carry the
    backdoor; p=1 marks everything (the flips are still drawn, so replay holds)."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"badnet_p must be in [0, 1], got {p}")
    draws = rng.gen.random(n)
    if p >= 1.0:
        return torch.ones(n, dtype=torch.bool)
    return torch.from_numpy(draws < p)


def matching_error(g_u: torch.Tensor, g_v: torch.Tensor, p: float = 2.0) -> torch.Tensor:
    """||g_u - g_v||_p^p (sum of |difference|^p)."""
    if g_u.shape != g_v.shape:
        raise ContractViolation("gradient dimensions differ")
    return (g_u - g_v).abs().pow(p).sum()


@dataclass
class AugmixAttackConfig:
    width: int = 20
    depth: int = 3
    alpha: float = 1.0
    iterations: int = 200
    norm_p: float = 2.0
    badnet_p: float = 1.0               # fraction of the reference batch that is backdoored
    lr: float = 1e-3
    betas: tuple[float, float] = (0.99, 0.999)
    optimizer: str = "adam"             # {"adam", "sgd"}
    op_pool: tuple[str, ...] = DEFAULT_OP_POOL
    seed: int = 0


@dataclass
class OptimizeResult:
    params: AugMixParams
    chains: ChainSet
    curve: list[float]          # pre-step error, one entry per iteration
    final_error: float = float("nan")
    diverged: bool = False


def optimize_params(
    batch: Batch,
    patch: TriggerPatch,
    target: int,
    model: torch.nn.Module,
    n_iterations: int,
    cfg: AugmixAttackConfig,
    rng: RngStream | None = None,
    loss_fn=None,
) -> OptimizeResult:
    """Descend the matching error between the AugMixed batch's gradient and the
    gradient of the BadNet version of the same batch, over the free (w, m)."""
    rng = rng or RngStream(cfg.seed, "augmix-opt")
    model.eval()
    selected = _badnet_selection(len(batch), cfg.badnet_p, rng.fork(3))
    g_u = gradient_of_batch(model, badnet_batch(batch, patch, target, selected),
                            loss_fn=loss_fn).detach()

    chains = sample_chains(batch, cfg.width, cfg.depth, cfg.op_pool, rng.fork(1))
    params = sample_params(len(batch), cfg.width, cfg.alpha, rng.fork(2)).requires_grad_()
    chains.render(batch.images)  # freeze constants up front

    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params.free_parameters(), lr=cfg.lr, betas=cfg.betas)
    elif cfg.optimizer == "sgd":
        opt = torch.optim.SGD(params.free_parameters(), lr=cfg.lr)
    else:
        raise ConfigError(f"unknown optimizer: {cfg.optimizer!r}")
    curve: list[float] = []
    for _ in range(max(0, n_iterations)):
        g_v = gradient_of_batch(model, augmix_apply(batch, chains, params), create_graph=True,
                                loss_fn=loss_fn)
        err = matching_error(g_u, g_v, cfg.norm_p)
        if not torch.isfinite(err):
            return OptimizeResult(params.detach(), chains, curve, diverged=True)
        curve.append(float(err.detach()))
        grads = torch.autograd.grad(err, params.free_parameters())
        for t, g in zip(params.free_parameters(), grads):
            t.grad = g
        opt.step()
    final = params.detach()
    g_v = gradient_of_batch(model, augmix_apply(batch, chains, final), loss_fn=loss_fn)
    final_error = float(matching_error(g_u, g_v, cfg.norm_p))
    if not curve:
        curve = [final_error]
    return OptimizeResult(final, chains, curve, final_error=final_error)


def random_search_baseline(
    batch: Batch,
    patch: TriggerPatch,
    target: int,
    model: torch.nn.Module,
    n_samples: int,
    cfg: AugmixAttackConfig,
    rng: RngStream | None = None,
) -> tuple[AugMixParams, ChainSet, float]:
    """Best-of-n freshly sampled (w, m, chains) by matching error; the
    random-sampling comparison baseline for the descent optimiser."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = rng or RngStream(cfg.seed, "augmix-search")
    model.eval()
    selected = _badnet_selection(len(batch), cfg.badnet_p, rng.fork(0))
    g_u = gradient_of_batch(model, badnet_batch(batch, patch, target, selected)).detach()
    best = None
    for k in range(n_samples):
        chains = sample_chains(batch, cfg.width, cfg.depth, cfg.op_pool, rng.fork(2 * k + 1))
        params = sample_params(len(batch), cfg.width, cfg.alpha, rng.fork(2 * k + 2))
        g_v = gradient_of_batch(model, augmix_apply(batch, chains, params))
        err = float(matching_error(g_u, g_v, cfg.norm_p))
        if best is None or err < best[2]:
            best = (params, chains, err)
    return best


# ---------------------------------------------------------------------------
# End-to-end schedule: clean warmup, then adversarially AugMixed batches

@dataclass
class AttackSchedule:
    clean_epochs: int = 10
    malicious_batches: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    betas: tuple[float, float] = (0.99, 0.999)
    seed: int = 0


def run_attack_schedule(
    target_model: torch.nn.Module,
    surrogate: torch.nn.Module,
    dataset,
    schedule: AttackSchedule,
    attack: AugmixAttackConfig,
    patch: TriggerPatch,
    target_label: int = 0,
    attack_enabled: bool = True,
) -> dict:
    """Train the target on clean data, then feed it optimised AugMix batches with
    honest labels; the surrogate trains in parallel on the same clean stream.

    With attack_enabled=False the malicious phase feeds the raw clean batches
    instead, giving the paired baseline under identical data ordering.
    """
    from .core import batches  # local import to avoid cycle at module load

    torch.manual_seed(schedule.seed)
    opt_t = torch.optim.Adam(target_model.parameters(), lr=schedule.lr, betas=schedule.betas)
    opt_s = torch.optim.Adam(surrogate.parameters(), lr=schedule.lr, betas=schedule.betas)

    def step(model, opt, batch: Batch) -> float:
        model.train()
        opt.zero_grad()
        loss = F.cross_entropy(model(batch.images), batch.labels)
        if not torch.isfinite(loss):
            raise TrainingDiverged("non-finite loss in attack schedule")
        loss.backward()
        opt.step()
        return float(loss.detach())

    clean_losses = []
    for epoch in range(schedule.clean_epochs):
        shuffle = RngStream(schedule.seed, "schedule-clean", epoch)
        for batch in batches(dataset, schedule.batch_size, shuffle_rng=shuffle, drop_last=True):
            clean_losses.append(step(target_model, opt_t, batch))
            step(surrogate, opt_s, batch)

    error_curves = []
    stream = batches(dataset, schedule.batch_size,
                     shuffle_rng=RngStream(schedule.seed, "schedule-malicious"), drop_last=True)
    for k in range(schedule.malicious_batches):
        try:
            batch = next(stream)
        except StopIteration:
            stream = batches(dataset, schedule.batch_size,
                             shuffle_rng=RngStream(schedule.seed, "schedule-malicious", k),
                             drop_last=True)
            batch = next(stream)
        if attack_enabled:
            result = optimize_params(batch, patch, target_label, surrogate,
                                     attack.iterations, attack,
                                     rng=RngStream(attack.seed, "schedule-opt", k))
            malicious = augmix_apply(batch, result.chains, result.params)
            # clean-label guarantee, checked on every malicious batch
            if not torch.equal(malicious.labels, batch.labels):
                raise ContractViolation("malicious batch modified labels")
            error_curves.append(result.curve)
            step(target_model, opt_t, malicious)
            # the surrogate simulates the victim, which consumed the malicious batch
            step(surrogate, opt_s, malicious)
        else:
            step(target_model, opt_t, batch)
            step(surrogate, opt_s, batch)

    return {
        "clean_loss": clean_losses,
        "matching_error_curves": error_curves,
        "target_model": target_model,
        "surrogate": surrogate,
    }

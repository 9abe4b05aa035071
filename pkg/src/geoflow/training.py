"""Joint GDN training: registration loss plus a geodesic loss against
Euler-shooting oracles generated on the fly from the network's own v0.

The inference path (predict) is encode -> latent rollout -> decode ->
flow integration -> warp; it never evaluates the EPDiff right-hand side.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .grid import DTYPE, GridSpec, ScalarField, Transform, VectorField, same_grid
from .fields import warp_t
from .epdiff import ShootingConfig, Trajectory, deform_along, epdiff_rhs_t, flow_t
from .spectral import apply_multiplier_t, laplacian_multiplier
from .regnet import RegistrationNet, latent_grid
from .gno import GeodesicOperator
from .optim import AdamW
from .datasets import RegistrationPair, stack_batch
from . import fileio

log = logging.getLogger(__name__)

_ORACLE_CAP = 1e3  # velocities here are O(0.1); anything near this has diverged


@dataclass(frozen=True)
class GdnConfig:
    """Architecture of the GDN (registration net + geodesic operator)."""

    ndim: int = 2
    image_dims: tuple[int, ...] = (32, 32)
    latent_channels: int = 8
    regnet_hidden: int = 16
    gno_channels: int = 16
    gno_layers: int = 4
    k_max: int = 2
    alpha_sigma: float = 3.0
    exponent_sigma: int = 3
    seed: int = 0

    @property
    def latent_dims(self) -> tuple[int, ...]:
        return tuple(n // 4 for n in self.image_dims)


@dataclass(frozen=True)
class TrainConfig:
    """Loss weights and optimizer settings for joint GDN training."""

    lam: float = 0.03
    eta: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    shooting: ShootingConfig = field(default_factory=ShootingConfig)
    mode: str = "joint"  # or "alternating"

    def __post_init__(self):
        if self.lam <= 0 or self.eta <= 0:
            raise ValueError(f"lam and eta must be positive, got {self.lam}, {self.eta}")
        if self.mode not in ("joint", "alternating"):
            raise ValueError(f"mode must be 'joint' or 'alternating', got {self.mode!r}")


class GdnModel(torch.nn.Module):
    """Registration network plus geodesic operator, trained jointly."""

    def __init__(self, config: GdnConfig, shooting: ShootingConfig | None = None):
        super().__init__()
        self.config = config
        self.shooting = shooting or ShootingConfig()
        self.regnet = RegistrationNet(config.ndim, config.latent_channels,
                                      config.regnet_hidden, seed=config.seed)
        self.gno = GeodesicOperator(config.latent_channels, config.gno_channels,
                                    config.gno_layers, config.k_max, config.latent_dims,
                                    config.alpha_sigma, config.exponent_sigma,
                                    seed=config.seed + 1)

    def predict_velocities(self, pair: torch.Tensor) -> torch.Tensor:
        """(N, 2, *dims) -> decoded velocities (steps+1, N, d, *dims)."""
        steps = self.shooting.steps
        z0 = self.regnet.encode_batch(pair)
        zs = self.gno.rollout_batch(z0, steps)
        stacked = torch.stack(zs)  # (T+1, N, C_z, *lat)
        t1, n = stacked.shape[0], stacked.shape[1]
        flat = stacked.reshape(t1 * n, *stacked.shape[2:])
        v = self.regnet.decode_batch(flat)
        return v.reshape(t1, n, *v.shape[1:])


def geodesic_loss_t(pred: torch.Tensor, oracle: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """Per-sample geodesic loss.

    pred: decoded velocities (T+1, N, d, *dims) including v_0;
    oracle: shooting solutions (T, N, d, *dims) for t = 1..T.
    Returns (N,): mean over steps of the cell-volume-weighted squared error.
    """
    if pred.shape[0] != oracle.shape[0] + 1:
        raise ValueError(
            f"expected oracle one step shorter than predictions, got "
            f"{oracle.shape[0]} vs {pred.shape[0]}"
        )
    d = grid.d
    diff = pred[1:] - oracle
    per_step = diff.pow(2).sum(dim=tuple(range(2, 3 + d))) * grid.cell_volume  # (T, N)
    return per_step.mean(dim=0)


def geodesic_loss(pred: list[VectorField], oracle: list[VectorField]) -> float:
    """Geodesic loss for one sample from field lists (v_0..v_tau vs v_1..v_tau)."""
    if len(pred) != len(oracle) + 1:
        raise ValueError(f"expected {len(pred) - 1} oracle fields, got {len(oracle)}")
    grid = same_grid(*pred, *oracle)
    p = torch.stack([v.components for v in pred]).unsqueeze(1)
    o = torch.stack([v.components for v in oracle]).unsqueeze(1)
    return float(geodesic_loss_t(p, o, grid)[0])


def make_oracle_t(v0: torch.Tensor, grid: GridSpec,
                  cfg: ShootingConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched Euler shooting oracle, detached from the graph.

    Returns (velocities (T, N, d, *dims), alive (N,) bool). Samples whose
    integration blows up are flagged dead and zero-filled; no gradient flows
    through the result.
    """
    mult = cfg.multiplier(grid)
    with torch.no_grad():
        v = v0.detach().clone()
        alive = torch.ones(v.shape[0], dtype=torch.bool)
        out = []
        for _ in range(cfg.steps):
            v = v + cfg.dt * epdiff_rhs_t(v, grid, mult)
            flat = v.reshape(v.shape[0], -1)
            # treat runaway magnitudes as blow-ups too: they poison the loss
            # long before they reach inf
            ok = torch.isfinite(flat).all(dim=1) & (flat.abs().amax(dim=1) < _ORACLE_CAP)
            alive &= ok
            if not ok.all():
                v = torch.where(alive.reshape(-1, *([1] * (v.dim() - 1))), v,
                                torch.zeros_like(v))
            out.append(v.clone())
        if not alive.all():
            log.warning("oracle shooting blew up for %d of %d samples; skipping them",
                        int((~alive).sum()), alive.numel())
        return torch.stack(out), alive


def make_oracle(v0: VectorField, cfg: ShootingConfig) -> list[VectorField]:
    """Oracle velocities v_1..v_tau for one sample (constants w.r.t. training)."""
    vs, alive = make_oracle_t(v0.components.unsqueeze(0), v0.grid, cfg)
    if not bool(alive[0]):
        from .epdiff import ShootingBlowupError

        raise ShootingBlowupError(cfg.steps)
    return [VectorField(v0.grid, v[0]) for v in vs]


def joint_loss(batch: torch.Tensor, model: GdnModel, cfg: TrainConfig,
               grid: GridSpec) -> tuple[torch.Tensor, dict]:
    """Joint GDN loss over a batch (N, 2, *dims): matching + metric + geodesic.

    The deformation for the matching term is integrated from the decoded
    velocity sequence (the inference path), never from the EPDiff solver.
    Returns (summed loss, per-term breakdown sums).
    """
    if batch.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    velocities = model.predict_velocities(batch)  # (T+1, N, d, *dims)
    oracle, alive = make_oracle_t(velocities[0], grid, cfg.shooting)
    if not alive.any():
        raise RuntimeError("every sample in the batch blew up the shooting oracle")
    idx = alive.nonzero(as_tuple=True)[0]
    velocities = velocities[:, idx]
    oracle = oracle[:, idx]
    source = batch[idx, 0]
    target = batch[idx, 1]

    d = grid.d
    spatial = tuple(range(1, 1 + d))

    us = flow_t(velocities, grid, cfg.shooting.dt)
    warped = warp_t(source.unsqueeze(1), us[-1], grid)[:, 0]
    match = (warped - target).pow(2).sum(dim=spatial) * grid.cell_volume  # (N,)

    mult = cfg.shooting.multiplier(grid)
    v0 = velocities[0]
    m0 = apply_multiplier_t(v0, mult.coefficients, d)
    reg = 0.5 * (m0 * v0).sum(dim=tuple(range(1, 2 + d))) * grid.cell_volume  # (N,)

    geo = geodesic_loss_t(velocities, oracle, grid)  # (N,)

    total = (cfg.lam * match + reg + cfg.eta * geo).sum()
    breakdown = {
        "match": match.detach().sum().item(),
        "reg": reg.detach().sum().item(),
        "geodesic": geo.detach().sum().item(),
        "total": total.detach().item(),
        "n": int(idx.numel()),
    }
    return total, breakdown


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i: i + batch_size] for i in range(0, n, batch_size)]


def evaluate_loss(pairs: list[RegistrationPair], model: GdnModel, cfg: TrainConfig) -> dict:
    """Loss terms over a dataset without gradient tracking; sums plus count."""
    grid = pairs[0].grid
    totals = {"match": 0.0, "reg": 0.0, "geodesic": 0.0, "total": 0.0, "n": 0}
    with torch.no_grad():
        for i in range(0, len(pairs), cfg.batch_size):
            batch = stack_batch(pairs[i: i + cfg.batch_size])
            _, bd = joint_loss(batch, model, cfg, grid)
            for k in totals:
                totals[k] += bd[k]
    return totals


def train(dataset: list[RegistrationPair], cfg: TrainConfig,
          model: GdnModel | None = None, val_dataset: list[RegistrationPair] | None = None,
          out_dir=None) -> tuple[GdnModel, list[dict]]:
    """Train a GDN with AdamW; returns the best-validation model and the epoch log.

    Writes loss.csv, config.json, last.ckpt and best.ckpt when out_dir is given.
    With mode="alternating", even epochs update the registration net only and
    odd epochs the geodesic operator only.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    grid = dataset[0].grid
    if model is None:
        model = GdnModel(GdnConfig(ndim=grid.d, image_dims=grid.dims, seed=cfg.seed),
                         cfg.shooting)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    best_val = float("inf")
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    for epoch in range(1, cfg.epochs + 1):
        if cfg.mode == "alternating":
            train_reg = epoch % 2 == 0
            for p in model.regnet.parameters():
                p.requires_grad_(train_reg)
            for p in model.gno.parameters():
                p.requires_grad_(not train_reg)
        sums = {"match": 0.0, "reg": 0.0, "geodesic": 0.0, "total": 0.0, "n": 0}
        for idx in _epoch_batches(len(dataset), cfg.batch_size, rng):
            batch = stack_batch([dataset[i] for i in idx])
            opt.zero_grad()
            total, bd = joint_loss(batch, model, cfg, grid)
            if not torch.isfinite(total):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch} "
                    f"(breakdown: {bd}); aborting"
                )
            total.backward()
            opt.step()
            for k in sums:
                sums[k] += bd[k]
        n = max(sums["n"], 1)
        row = {
            "epoch": epoch,
            "match": sums["match"] / n,
            "reg": sums["reg"] / n,
            "geodesic": sums["geodesic"] / n,
            "total": sums["total"] / n,
        }
        if val_dataset:
            val = evaluate_loss(val_dataset, model, cfg)
            row["val_total"] = val["total"] / max(val["n"], 1)
        history.append(row)

        current_val = row.get("val_total", row["total"])
        if current_val < best_val:
            best_val = current_val
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if out is not None:
            header = list(history[0].keys())
            fileio.write_csv(out / "loss.csv", header,
                             [[r.get(k, "") for k in header] for r in history])
            save_checkpoint(out / "last.ckpt", model)

    model.load_state_dict(best_state)
    if out is not None:
        save_checkpoint(out / "best.ckpt", model)
    return model, history


def predict(source: ScalarField, target: ScalarField,
            model: GdnModel) -> tuple[Trajectory, ScalarField]:
    """Full-resolution geodesic prediction; never calls the EPDiff solver."""
    grid = same_grid(source, target)
    if any(n % 4 != 0 for n in grid.dims):
        raise ValueError(f"grid dims must be divisible by 4, got {grid.dims}")
    with torch.no_grad():
        pair = torch.stack([source.values, target.values]).unsqueeze(0)
        velocities = model.predict_velocities(pair)  # (T+1, 1, d, *dims)
        us = flow_t(velocities, grid, model.shooting.dt)
    vfields = [VectorField(grid, v[0]) for v in velocities]
    transforms = [Transform(grid, VectorField(grid, u[0])) for u in us]
    traj = Trajectory(vfields, transforms)
    traj.images = deform_along(source, traj)
    return traj, traj.images[-1]


def save_checkpoint(path, model: GdnModel) -> None:
    meta = {
        "kind": "gdn-checkpoint",
        "model": {**asdict(model.config), "image_dims": list(model.config.image_dims)},
        "shooting": asdict(model.shooting),
    }
    tensors = {name: p for name, p in model.state_dict().items()}
    fileio.write_named_tensors(path, meta, tensors)


def load_checkpoint(path) -> GdnModel:
    meta, tensors = fileio.read_named_tensors(path)
    if meta.get("kind") != "gdn-checkpoint":
        raise ValueError(f"{path}: not a GDN checkpoint")
    mc = dict(meta["model"])
    mc["image_dims"] = tuple(mc["image_dims"])
    model = GdnModel(GdnConfig(**mc), ShootingConfig(**meta["shooting"]))
    model.load_state_dict(tensors)
    return model

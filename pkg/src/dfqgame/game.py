"""Losses and the alternating maximization/minimization loop.

One iteration = one Adam step on the generator against its composite loss,
then one Nesterov-SGD step on the quantized network against the
calibration loss. The game value is probed on a fixed batch before, between
and after the two steps to produce a balance-gap record per iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import AdamState, SgdNesterovState, Tensor, gaussian, softmax
from .adapt import (
    BalanceGapRecord,
    LogitsPair,
    agreement_distribution,
    balance_gap,
    disagreement_distribution,
    game_value,
    info_entropy,
    normalize_entropy,
)
from .nets import (
    BNStatsRecord,
    Generator,
    MLP,
    NumericalError,
    QuantizedMLP,
    accuracy,
    collect_generated_bns,
    one_hot,
)

_CE_FLOOR = 1e-12
PROBE_BATCH = 64

LOSS_NAMES = ("L_ds", "L_as", "L_b", "L_BNS")


@dataclass
class HyperParams:
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 1.0
    lambda_l: float = 0.3
    lambda_u: float = 0.8
    tau: float = 1.0
    lr_g: float = 1e-3
    lr_q: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    iters_per_epoch: int = 50
    lr_decay_factor: float = 0.1
    lr_decay_period: int = 50  # epochs between Q learning-rate decays
    bns_stat: str = "variance"  # or "std"
    # per-term generator-loss weights; None means "use alpha". The ablation
    # table needs the disagreement and agreement terms to toggle separately.
    alpha_ds: float | None = None
    alpha_as: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.lambda_l < self.lambda_u <= 1.0:
            raise ValueError(
                f"need 0 <= lambda_l < lambda_u <= 1, got "
                f"({self.lambda_l}, {self.lambda_u})")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if min(self.alpha, self.beta, self.gamma) < 0.0:
            raise ValueError("loss weights must be non-negative")
        if self.bns_stat not in ("variance", "std"):
            raise ValueError(f"bns_stat must be variance|std, got {self.bns_stat}")

    @property
    def w_ds(self) -> float:
        return self.alpha if self.alpha_ds is None else self.alpha_ds

    @property
    def w_as(self) -> float:
        return self.alpha if self.alpha_as is None else self.alpha_as


@dataclass
class IterationLog:
    epoch: int
    iteration: int
    l_ds: float
    l_as: float
    l_b: float
    l_bns: float
    l_g: float
    l_q: float
    bg: BalanceGapRecord
    mean_h_norm: float
    q_accuracy: float | None = None


@dataclass
class GameState:
    p: MLP
    q: QuantizedMLP
    g: Generator
    hp: HyperParams
    opt_g: AdamState
    opt_q: SgdNesterovState
    probe_z: Tensor
    probe_y: Tensor
    logs: list[IterationLog] = field(default_factory=list)
    iteration: int = 0


# -- losses -------------------------------------------------------------------


def loss_ds(p_ds: Tensor, y: Tensor) -> Tensor:
    """Cross-entropy pushing the disagreement distribution toward the
    conditioning label."""
    logp = p_ds.clip_min(_CE_FLOOR).log()
    return -(y * logp).sum(axis=-1).mean()


def loss_as(p_as: Tensor, y: Tensor) -> Tensor:
    """Cross-entropy pushing the agreement distribution toward the label."""
    logp = p_as.clip_min(_CE_FLOOR).log()
    return -(y * logp).sum(axis=-1).mean()


def loss_bound(h_norm: Tensor, lambda_l: float, lambda_u: float) -> Tensor:
    """Two-sided hinge keeping the normalized entropy inside
    [lambda_l, lambda_u]."""
    low = (lambda_l - h_norm).relu()
    high = (h_norm - lambda_u).relu()
    return (low + high).mean()


def loss_bns(record: BNStatsRecord, stat: str = "variance") -> Tensor:
    """Squared-l2 mismatch between generated-batch BN statistics and the
    statistics stored in P, summed over BN layers. `stat` selects whether
    the spread term compares variances (BN storage convention) or stds."""
    total = None
    for mu_g, var_g, mu_s, var_s in zip(record.mean_generated,
                                        record.var_generated,
                                        record.mean_stored,
                                        record.var_stored):
        d_mu = mu_g - Tensor(mu_s)
        if stat == "variance":
            d_sig = var_g - Tensor(var_s)
        else:
            d_sig = var_g.sqrt() - Tensor(np.sqrt(var_s))
        term = (d_mu * d_mu).sum() + (d_sig * d_sig).sum()
        total = term if total is None else total + term
    return total


def generator_loss(g: Generator, p: MLP, q: QuantizedMLP, z: Tensor, y: Tensor,
                   hp: HyperParams, batch_min: float | None = None):
    """Composite maximization objective; returns (loss, components dict).

    The gradient path reaches only the generator: P's weights are fixed
    and Q's are held out of the graph by the caller during this step.
    """
    x = g.forward(z, y, mode="train")
    z_p, (taps_mean, taps_var) = p.forward(x, mode="eval", collect_bns=True)
    z_q = q.forward(x, mode="eval")
    lp = LogitsPair(z_p, z_q)
    p_ds = disagreement_distribution(lp)
    p_as = agreement_distribution(lp)
    h_info = info_entropy(p_ds, validate=False)
    h_norm, _ = normalize_entropy(h_info, lp.class_count, batch_min)

    record = BNStatsRecord(
        mean_generated=taps_mean, var_generated=taps_var,
        mean_stored=[bn.running_mean for _, bn in p.blocks],
        var_stored=[bn.running_var for _, bn in p.blocks],
    )
    l_ds = loss_ds(p_ds, y)
    l_as = loss_as(p_as, y)
    l_b = loss_bound(h_norm, hp.lambda_l, hp.lambda_u)
    l_bns = loss_bns(record, hp.bns_stat)

    if hp.alpha_ds is None and hp.alpha_as is None:
        l_g = hp.alpha * (l_ds + l_as) + hp.beta * l_b + hp.gamma * l_bns
    else:
        l_g = (hp.w_ds * l_ds + hp.w_as * l_as
               + hp.beta * l_b + hp.gamma * l_bns)

    components = {
        "l_ds": l_ds.item(), "l_as": l_as.item(),
        "l_b": l_b.item(), "l_bns": l_bns.item(),
        "mean_h_norm": float(h_norm.data.mean()),
    }
    if not math.isfinite(l_g.item()):
        raise NumericalError(f"non-finite generator loss: {components}")
    return l_g, components


def calibration_loss(lp: LogitsPair, tau: float, batch_min: float | None = None) -> Tensor:
    """Mean of 1 - H' over temperature-softened disagreement; at tau=1 this
    is exactly the game value."""
    p_ds = softmax(lp.z_p - lp.z_q, axis=-1, temperature=tau)
    h_info = info_entropy(p_ds, validate=False)
    h_norm, _ = normalize_entropy(h_info, lp.class_count, batch_min)
    return 1.0 - h_norm.mean()


# -- probe / snapshots ----------------------------------------------------------


def probe_game_value(g: Generator, p: MLP, q: QuantizedMLP,
                     probe_z: Tensor, probe_y: Tensor) -> float:
    """R on the fixed probe batch as a pure function of (theta_g, theta_q):
    G uses batch statistics without touching its running buffers, P and Q
    run in eval mode."""
    x = g.forward(probe_z, probe_y, mode="batch")
    lp = LogitsPair(p.forward(x, mode="eval"), q.forward(x, mode="eval"))
    return game_value(lp).item()


def probe_game_gradients(g: Generator, p: MLP, q: QuantizedMLP,
                         probe_z: Tensor, probe_y: Tensor):
    """Gradients of the probe game value w.r.t. G's and Q's parameters."""
    params = g.parameters() + q.parameters()
    for t in params:
        t.grad = None
    x = g.forward(probe_z, probe_y, mode="batch")
    lp = LogitsPair(p.forward(x, mode="eval"), q.forward(x, mode="eval"))
    value = game_value(lp)
    value.backward()
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
             for t in params]
    for t in params:
        t.grad = None
    return grads


def _snapshot(params: list[Tensor]) -> list[np.ndarray]:
    return [t.data.copy() for t in params]


def _restore(params: list[Tensor], snap: list[np.ndarray]) -> None:
    for t, s in zip(params, snap):
        t.data = s.copy()


def _set_requires_grad(params: list[Tensor], flag: bool) -> list[bool]:
    prev = [t.requires_grad for t in params]
    for t in params:
        t.requires_grad = flag
    return prev


def _restore_requires_grad(params: list[Tensor], prev: list[bool]) -> None:
    for t, f in zip(params, prev):
        t.requires_grad = f


# -- steps ------------------------------------------------------------------


def draw_batch(rng, batch_size: int, noise_dim: int, class_count: int):
    z = gaussian(rng, (batch_size, noise_dim))
    labels = rng.integers(0, class_count, size=batch_size)
    return z, one_hot(labels, class_count)


def maximization_step(state: GameState, z: Tensor, y: Tensor) -> dict:
    """One Adam step on the generator; Q is held bit-identical."""
    prev = _set_requires_grad(state.q.parameters(), False)
    try:
        l_g, components = generator_loss(state.g, state.p, state.q, z, y, state.hp)
        state.opt_g.zero_grad()
        l_g.backward()
        state.opt_g.step()
    finally:
        _restore_requires_grad(state.q.parameters(), prev)
    components["l_g"] = l_g.item()
    return components


def minimization_step(state: GameState, z: Tensor, y: Tensor) -> float:
    """One Nesterov-SGD step on Q against the calibration loss, on a fresh
    batch from the just-updated generator; G is held bit-identical."""
    x = state.g.forward(z, y, mode="batch").detach()
    z_p = state.p.forward(x, mode="eval").detach()
    z_q = state.q.forward(x, mode="eval")
    l_q = calibration_loss(LogitsPair(z_p, z_q), state.hp.tau)
    if not math.isfinite(l_q.item()):
        raise NumericalError(f"non-finite calibration loss: {l_q.item()}")
    state.opt_q.zero_grad()
    l_q.backward()
    state.opt_q.step()
    return l_q.item()


def init_game(p: MLP, q: QuantizedMLP, g: Generator, hp: HyperParams,
              rng) -> GameState:
    """Freeze P, build optimizers, draw the fixed probe batch."""
    _set_requires_grad(p.parameters(), False)
    probe_z, probe_y = draw_batch(rng, PROBE_BATCH, g.spec.noise_dim,
                                  g.spec.class_count)
    return GameState(
        p=p, q=q, g=g, hp=hp,
        opt_g=AdamState(g.parameters(), lr=hp.lr_g),
        opt_q=SgdNesterovState(q.parameters(), lr=hp.lr_q,
                               momentum=0.9, weight_decay=1e-4),
        probe_z=probe_z, probe_y=probe_y,
    )


def run_game(p: MLP, q: QuantizedMLP, g: Generator, hp: HyperParams, rng,
             eval_data=None, eval_period: int = 10) -> GameState:
    """The full alternating loop.

    eval_data: optional (x, labels) held-out arrays; Q accuracy is logged
    every `eval_period` epochs (and on the final iteration).
    """
    state = init_game(p, q, g, hp, rng)
    for epoch in range(hp.epochs):
        if epoch > 0 and hp.lr_decay_period > 0 and epoch % hp.lr_decay_period == 0:
            state.opt_q.lr *= hp.lr_decay_factor
        for it in range(hp.iters_per_epoch):
            r_before = probe_game_value(g, p, q, state.probe_z, state.probe_y)
            z, y = draw_batch(rng, hp.batch_size, g.spec.noise_dim,
                              g.spec.class_count)
            components = maximization_step(state, z, y)
            r_mid = probe_game_value(g, p, q, state.probe_z, state.probe_y)
            z2, y2 = draw_batch(rng, hp.batch_size, g.spec.noise_dim,
                                g.spec.class_count)
            l_q = minimization_step(state, z2, y2)
            r_after = probe_game_value(g, p, q, state.probe_z, state.probe_y)

            state.iteration += 1
            last_iter = (epoch == hp.epochs - 1 and it == hp.iters_per_epoch - 1)
            q_acc = None
            if eval_data is not None and (
                    (it == hp.iters_per_epoch - 1 and epoch % eval_period == 0)
                    or last_iter):
                q_acc = accuracy(q, eval_data[0], eval_data[1])
            state.logs.append(IterationLog(
                epoch=epoch, iteration=it,
                l_ds=components["l_ds"], l_as=components["l_as"],
                l_b=components["l_b"], l_bns=components["l_bns"],
                l_g=components["l_g"], l_q=l_q,
                bg=balance_gap(r_before, r_mid, r_after),
                mean_h_norm=components["mean_h_norm"],
                q_accuracy=q_acc,
            ))
    return state


def ablation_config(hp: HyperParams, disable) -> HyperParams:
    """Zero out the weights of the named generator-loss terms."""
    disable = set(disable)
    unknown = disable - set(LOSS_NAMES)
    if unknown:
        raise ValueError(f"unknown loss names: {sorted(unknown)}")
    kwargs = {}
    if "L_ds" in disable or "L_as" in disable:
        kwargs["alpha_ds"] = 0.0 if "L_ds" in disable else hp.w_ds
        kwargs["alpha_as"] = 0.0 if "L_as" in disable else hp.w_as
    if "L_b" in disable:
        kwargs["beta"] = 0.0
    if "L_BNS" in disable:
        kwargs["gamma"] = 0.0
    return replace(hp, **kwargs)


def bg_halving_trial(p: MLP, q: QuantizedMLP, g: Generator, hp: HyperParams,
                     rng, iterations: int = 50):
    """First-order scaling probe: at each iteration, take the normal step
    and, from the same state and batches, a step with both learning rates
    halved; record both balance gaps. Training continues from the full-step
    state, so each pair is a controlled comparison."""
    state = init_game(p, q, g, hp, rng)
    half_hp = replace(hp, lr_g=hp.lr_g / 2, lr_q=hp.lr_q / 2)
    pairs = []
    for _ in range(iterations):
        z1, y1 = draw_batch(rng, hp.batch_size, g.spec.noise_dim, g.spec.class_count)
        z2, y2 = draw_batch(rng, hp.batch_size, g.spec.noise_dim, g.spec.class_count)
        g_params, q_params = g.parameters(), q.parameters()
        snap_g, snap_q = _snapshot(g_params), _snapshot(q_params)
        opt_g_snap = ([m.copy() for m in state.opt_g.m],
                      [v.copy() for v in state.opt_g.v], state.opt_g.step_count)
        opt_q_snap = ([v.copy() for v in state.opt_q.velocity],
                      state.opt_q.step_count)
        bn_snap = [(bn.running_mean.copy(), bn.running_var.copy())
                   for _, bn in g.blocks]

        def one_iteration(hp_used):
            state.hp = hp_used
            state.opt_g.lr = hp_used.lr_g
            state.opt_q.lr = hp_used.lr_q
            r_before = probe_game_value(g, p, q, state.probe_z, state.probe_y)
            maximization_step(state, z1, y1)
            r_mid = probe_game_value(g, p, q, state.probe_z, state.probe_y)
            minimization_step(state, z2, y2)
            r_after = probe_game_value(g, p, q, state.probe_z, state.probe_y)
            return balance_gap(r_before, r_mid, r_after)

        def restore_all():
            _restore(g_params, snap_g)
            _restore(q_params, snap_q)
            state.opt_g.m = [m.copy() for m in opt_g_snap[0]]
            state.opt_g.v = [v.copy() for v in opt_g_snap[1]]
            state.opt_g.step_count = opt_g_snap[2]
            state.opt_q.velocity = [v.copy() for v in opt_q_snap[0]]
            state.opt_q.step_count = opt_q_snap[1]
            for (rm, rv), (_, bn) in zip(bn_snap, g.blocks):
                bn.running_mean = rm.copy()
                bn.running_var = rv.copy()

        bg_half = one_iteration(half_hp)
        restore_all()
        bg_full = one_iteration(hp)
        pairs.append((bg_full, bg_half))
    state.hp = hp
    return pairs

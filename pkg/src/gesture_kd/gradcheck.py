"""Central finite-difference oracle for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, zero_tol: float = 0.0) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    err = np.abs(analytic - numeric) / denom
    both_zero = (np.abs(analytic) <= zero_tol) & (np.abs(numeric) <= zero_tol)
    return float(np.where(both_zero, 0.0, err).max(initial=0.0))


def finite_difference_check(f: Callable[[], Tensor], params: Tensor | Sequence[Tensor],
                            eps: float = 1e-5, zero_tol: float = 0.0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is a zero-argument closure that rebuilds the scalar loss from the
    current values of ``params``; each coordinate is perturbed in place and
    restored afterwards.  The error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    ``zero_tol`` treats coordinates where both gradients are within it of zero
    as exact agreement.  Some gradients vanish identically (a bias feeding a
    training-mode batch norm, the key bias of attention), and there the
    central difference is pure roundoff of order ``1e-16 * |f| / eps``.
    """
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    for p in params:
        p.requires_grad = True
    analytic = ag.grad(f(), params)

    worst = 0.0
    with ag.no_grad():
        for p, a in zip(params, analytic):
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise ag.NonFiniteError(f"non-finite loss while perturbing coordinate {i}")
                numeric.reshape(-1)[i] = (up - down) / (2.0 * eps)
            worst = max(worst, _relative_error(a, numeric, zero_tol))
    return worst


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    def t(*shape, positive=False):
        x = rng.normal(size=shape)
        return Tensor(np.abs(x) + 0.5 if positive else x)

    a, b = t(3, 4), t(3, 4)
    p = t(3, 4, positive=True)
    m1, m2 = t(2, 3, 4), t(4, 5)
    bm1, bm2 = t(2, 3, 4), t(2, 4, 3)
    gamma, beta = t(4), t(4)
    bn_x = t(5, 4)
    rm, rv = np.zeros(4), np.ones(4)
    drop_rng_seed = int(rng.integers(1 << 30))

    def weighted(out):
        return lambda: (out() * Tensor(np.sin(np.arange(out().size).reshape(out().shape) + 1.0))).sum()

    def dropped():
        return ag.dropout(a, 0.3, True, np.random.default_rng(drop_rng_seed))

    return {
        "add": (weighted(lambda: a + b), [a, b]),
        "mul": (weighted(lambda: a * b), [a, b]),
        "div": (weighted(lambda: a / p), [a, p]),
        "sub": (weighted(lambda: a - b), [a, b]),
        "matmul": (weighted(lambda: ag.matmul(m1, m2)), [m1, m2]),
        "batched_matmul": (weighted(lambda: ag.matmul(bm1, bm2)), [bm1, bm2]),
        "concat": (weighted(lambda: ag.concat([a, b], axis=0)), [a, b]),
        "slice": (weighted(lambda: ag.slice_(a, 1, 3)), [a]),
        "transpose": (weighted(lambda: ag.transpose(m1, (2, 0, 1))), [m1]),
        "reshape": (weighted(lambda: a.reshape(2, 6)), [a]),
        "repeat": (weighted(lambda: ag.repeat(a, 3)), [a]),
        "sigmoid": (weighted(lambda: ag.sigmoid(a)), [a]),
        "tanh": (weighted(lambda: ag.tanh(a)), [a]),
        "exp": (weighted(lambda: ag.exp(a)), [a]),
        "ln": (weighted(lambda: ag.log(p)), [p]),
        "mean": (lambda: (ag.mean(a, axis=1) * Tensor([1.0, -2.0, 0.5])).sum(), [a]),
        "sum": (lambda: (ag.sum_(a, axis=0) * Tensor([1.0, 2.0, 3.0, 4.0])).sum(), [a]),
        "mish": (weighted(lambda: ag.mish(a)), [a]),
        "softmax": (weighted(lambda: ag.softmax(a)), [a]),
        "log_softmax": (weighted(lambda: ag.log_softmax(a)), [a]),
        "cumax": (weighted(lambda: ag.cumax(a)), [a]),
        "layer_norm": (weighted(lambda: ag.layer_norm(a, gamma, beta)), [a, gamma, beta]),
        "batch_norm_train": (weighted(lambda: ag.batch_norm(bn_x, gamma, beta, rm.copy(), rv.copy(), True)),
                             [bn_x, gamma, beta]),
        "batch_norm_eval": (weighted(lambda: ag.batch_norm(bn_x, gamma, beta, rm + 0.1, rv * 2.0, False)),
                            [bn_x, gamma, beta]),
        "dropout": (weighted(dropped), [a]),
    }


# gradients this small on both sides count as zero: it matches the 1e-8
# denominator floor and sits above central-difference roundoff at eps=1e-5
ZERO_TOL = 1e-8


def run_suite(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error for every primitive and every composite network.

    Networks run on reduced shapes so the whole suite takes seconds.
    """
    from .config import ModelConfig
    from .fusion import FusionMLP, KnowledgeSharingModel, fusion_forward, fusion_loss, sub_network_loss
    from .onlstm import ONLSTMLayer, onlstm_cell_step, onlstm_sequence
    from .transformer import TransformerBlock, transformer_block

    rng = np.random.default_rng(seed)
    results = {}
    for name, (f, params) in _primitive_cases(rng).items():
        results[f"primitive:{name}"] = finite_difference_check(f, params, eps)

    block = TransformerBlock(6, 2, 24, rng)
    x = Tensor(rng.normal(size=(2, 8, 6)))
    proj = Tensor(rng.normal(size=(2, 8, 6)))
    results["transformer_block"] = finite_difference_check(
        lambda: (transformer_block(x, block) * proj).sum(), [x] + block.parameters(), eps, ZERO_TOL)

    layer = ONLSTMLayer(4, 6, 3, rng)
    xs = Tensor(rng.normal(size=(2, 3, 4)))
    hp = Tensor(rng.normal(size=(2, 3, 6)))

    def cell_loss():
        state, total = layer.initial_state(2), Tensor(0.0)
        for step in range(3):
            state = onlstm_cell_step(layer, xs[:, step], state)
            total = total + (state.h * hp[:, step]).sum()
        return total

    results["onlstm_cell_3_steps"] = finite_difference_check(cell_loss, [xs] + layer.parameters(), eps)
    results["onlstm_sequence"] = finite_difference_check(
        lambda: (onlstm_sequence(layer, xs) * hp).sum(), [xs] + layer.parameters(), eps)

    mlp = FusionMLP(4, 5, 3, 0.0, rng)
    ft, fo = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4)))
    fp = Tensor(rng.normal(size=(6, 3)))
    results["fusion_mlp"] = finite_difference_check(
        lambda: (fusion_forward(ft, fo, mlp) * fp).sum(), [ft, fo] + mlp.parameters(), eps, ZERO_TOL)

    logit_m, logit_f = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(4, 5)))
    labels = rng.integers(0, 5, size=4)
    results["sub_network_loss"] = finite_difference_check(
        lambda: sub_network_loss(logit_m, logit_f, labels, 3.0), [logit_m], eps)
    results["fusion_loss"] = finite_difference_check(
        lambda: fusion_loss(logit_f, logit_m, labels, 3.0), [logit_f], eps)

    tiny = ModelConfig(seq_len=4, d_model=6, heads=2, ff_dim=8, blocks=1, fc_dim=5, num_classes=3,
                       lstm_hidden=4, chunk_size=2, dropout=0.0)
    model = KnowledgeSharingModel(tiny, seed=seed)
    model.train()
    xb = Tensor(rng.normal(size=(4, 4, 6)))
    yb = rng.integers(0, 3, size=4)

    loss_t, loss_o, loss_f = frozen_teacher_losses(model, xb, yb, 3.0)
    results["loss_transformer_end_to_end"] = finite_difference_check(
        loss_t, model.transformer.parameters(), eps, ZERO_TOL)
    results["loss_onlstm_end_to_end"] = finite_difference_check(
        loss_o, model.onlstm.parameters(), eps, ZERO_TOL)
    results["loss_fusion_end_to_end"] = finite_difference_check(
        loss_f, model.parameters(), eps, ZERO_TOL)

    params = model.parameters()
    picked = rng.choice(len(params), size=len(params) // 2, replace=False)
    results["joint_step_sampled"] = finite_difference_check(
        frozen_teacher_loss(model, xb, yb, 3.0), [params[i] for i in sorted(picked)], eps, ZERO_TOL)
    return results


def _pinned_teachers(model, x):
    def run():
        saved = [b.copy() for _, b in model.named_buffers()]
        try:
            return model(x)
        finally:
            for (_, buf), value in zip(model.named_buffers(), saved):
                buf[...] = value

    with ag.no_grad():
        base = run()
    return run, Tensor(base.fusion.data), Tensor(base.ensemble.data)


def frozen_teacher_losses(model, x, labels, temperature: float):
    """Closures for L_t, L_o and L_f with their teacher logits pinned at the current parameters.

    Teachers are detached during training, so the backprop gradient is the
    derivative with the teacher held constant; perturbing a parameter must not
    move the teacher either.  Batch-norm running buffers are restored after
    each call so repeated evaluations see the same state.
    """
    from .fusion import fusion_loss, sub_network_loss

    run, fusion_teacher, ensemble_teacher = _pinned_teachers(model, x)
    return (lambda: sub_network_loss(run().transformer, fusion_teacher, labels, temperature),
            lambda: sub_network_loss(run().onlstm, fusion_teacher, labels, temperature),
            lambda: fusion_loss(run().fusion, ensemble_teacher, labels, temperature))


def frozen_teacher_loss(model, x, labels, temperature: float) -> Callable[[], Tensor]:
    """Closure for the total L_t + L_o + L_f with pinned teachers (one forward per call)."""
    from .fusion import LogitSet, joint_losses

    run, fusion_teacher, ensemble_teacher = _pinned_teachers(model, x)

    def loss():
        logits = run()
        pinned = LogitSet(logits.transformer, logits.onlstm, logits.fusion, ensemble_teacher)
        loss_t, loss_o, _ = joint_losses(logits._replace(fusion=fusion_teacher), labels, temperature)
        _, _, loss_f = joint_losses(pinned, labels, temperature)
        return loss_t + loss_o + loss_f

    return loss

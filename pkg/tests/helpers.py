"""Shared oracles for the test suite.

The enumeration oracle computes the exact conditional action likelihood by
brute force over all K^M skill sequences, independently of the bound
accessor it is used to check.  The finite-difference helpers evaluate the
objective on a float64 twin of the model, so the numeric gradient is a
wide-precision reference for both single and double analytic gradients.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch

from paramskills.objective import LossWeights, total_loss
from paramskills.probkit import gauss_log_prob
from paramskills.skillnet import PolicyBundle


def enumeration_log_likelihood(batch, bundle) -> tuple[float, np.ndarray]:
    """Exact log p(a_{1:M} | s_{1:M}, l) plus per-step skill posteriors.

    Brute force: every skill sequence contributes the product of its causal
    skill probabilities and per-step action likelihoods.  Requires d == 0 and
    a single-trajectory batch.
    """
    cfg = bundle.config
    assert cfg.d == 0 and batch.size == 1
    m = int(batch.lengths[0])
    k_count = cfg.K
    with torch.no_grad():
        log_pi = torch.log_softmax(
            bundle.discrete_policy_forward(batch)[0, :m], dim=-1
        ).double().numpy()
        lp = np.zeros((m, k_count))
        z_empty = batch.states.new_zeros(1, m, 0)
        for k in range(k_count):
            onehot = batch.states.new_zeros(1, m, k_count)
            onehot[..., k] = 1.0
            k_in = onehot if cfg.compressor_sees_k else None
            s_comp = bundle.compress(z_empty, batch.proprio[:, :m], k_in)
            dist = bundle.subpolicy_forward(s_comp, z_empty)
            lp[:, k] = gauss_log_prob(batch.actions[:, :m], dist)[0].double().numpy()

    log_weights = []
    sequences = list(itertools.product(range(k_count), repeat=m))
    for seq in sequences:
        log_weights.append(sum(log_pi[t, k] + lp[t, k] for t, k in enumerate(seq)))
    log_weights = np.array(log_weights)
    top = log_weights.max()
    total = top + math.log(np.exp(log_weights - top).sum())

    posterior = np.zeros((m, k_count))
    weights = np.exp(log_weights - total)
    for seq, w in zip(sequences, weights):
        for t, k in enumerate(seq):
            posterior[t, k] += w
    return float(total), posterior


def double_twin(bundle: PolicyBundle) -> PolicyBundle:
    """A float64 copy holding exactly the same parameter values."""
    twin = PolicyBundle(bundle.config)
    twin.load_state_dict(bundle.state_dict())
    return twin.double()


def fd_total_loss_gradient(
    bundle64, batch64, weights, noise64, sampling_source, name, flat_index, eps=1e-5
):
    """Central finite difference of the objective w.r.t. one parameter entry."""
    param = dict(bundle64.named_parameters())[name]
    flat = param.data.view(-1)
    origin = flat[flat_index].item()
    values = []
    for shift in (eps, -eps):
        flat[flat_index] = origin + shift
        report = total_loss(batch64, bundle64, weights, noise64, sampling_source)
        values.append(float(report.total.detach()))
    flat[flat_index] = origin
    return (values[0] - values[1]) / (2 * eps)


def probe_gradients(
    bundle,
    batch,
    noise,
    sampling_source,
    candidates,
    n_probes,
    seed,
    min_grad,
    weights=None,
):
    """Pick parameter entries with healthy analytic gradients and FD-check them.

    Returns a list of (name, index, analytic, numeric) tuples of length
    n_probes.  The numeric side always runs on a float64 twin with the same
    parameter values, batch, and noise.
    """
    weights = weights or LossWeights()
    report = total_loss(batch, bundle, weights, noise, sampling_source)
    bundle.zero_grad()
    report.total.backward()
    grads = {name: p.grad.detach().clone() for name, p in candidates}

    rng = np.random.default_rng(seed)
    pool = []
    for name, p in candidates:
        flat = grads[name].view(-1)
        strong = torch.nonzero(flat.abs() >= min_grad).view(-1).tolist()
        pool.extend((name, idx, float(flat[idx])) for idx in strong)
    assert len(pool) >= n_probes, f"only {len(pool)} parameter entries with |grad| >= {min_grad}"
    picks = rng.choice(len(pool), size=n_probes, replace=False)

    twin = double_twin(bundle)
    batch64 = batch.to(torch.float64)
    noise64 = type(noise)(
        gumbel=noise.gumbel.double(),
        z_skill=noise.z_skill.double(),
        z_step=noise.z_step.double(),
    )
    results = []
    for pick in picks:
        name, idx, analytic = pool[int(pick)]
        numeric = fd_total_loss_gradient(
            twin, batch64, weights, noise64, sampling_source, name, idx
        )
        results.append((name, idx, analytic, numeric))
    return results


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric))

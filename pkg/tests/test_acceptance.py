"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line per measured check."""

import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from straightfm import repro
from straightfm.evalmetrics import hungarian
from straightfm.synthdata import Rng


def all_pass(checks):
    failed = [c.line() for c in checks if not c.passed]
    assert not failed, "\n".join(failed)


def test_criterion_1_gradient_fidelity(report):
    all_pass(report(repro.gradient_fidelity(seed=0, instances=20)))


def test_criterion_2_closed_form_values(report):
    all_pass(report(repro.closed_form()))


def test_criterion_3_solver_orders(report):
    all_pass(report(repro.solver_orders()))


def test_criterion_4_w2_oracle(report):
    checks = repro.w2_oracle(seed=0, instances=50)
    # second, independent assignment solver on the same kind of instances
    rng = Rng(0, stream=200)
    worst = 0.0
    for k in range(50):
        n = 1 + k % 7
        a, b = rng.normal((n, 2)), rng.normal((n, 2)) * 2
        cost = ((a[:, None] - b[None]) ** 2).sum(-1)
        r, c = linear_sum_assignment(cost)
        ours = math.sqrt(cost[np.arange(n), hungarian(cost)].mean())
        worst = max(worst, abs(ours - math.sqrt(cost[r, c].mean())))
    checks.append(repro.Check("hungarian W2 == scipy assignment W2", worst <= 1e-9, f"max |diff| {worst:.2e}"))
    all_pass(report(checks))


def test_criterion_5_straightness_ordering(pipeline, report):
    all_pass(report(repro.straightness_ordering(pipeline, n=1000)))


def test_criterion_6_few_step_quality(pipeline, report):
    all_pass(report(repro.few_step_quality(pipeline)))


def test_criterion_7_coupling_similarity(pipeline, report):
    all_pass(report(repro.coupling_similarity_check(pipeline, n=2560)))


def test_criterion_8_transport_cost(pipeline, report):
    all_pass(report(repro.transport_cost_check(pipeline, n=10_000)))


def test_criterion_9_variant_contracts(report):
    all_pass(report(repro.variant_contracts(seed=0)))

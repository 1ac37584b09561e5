"""The gradcheck harness itself: reports, fault injection, known oracles."""

import numpy as np

from volformer import ops
from volformer.gradcheck import GradCheckReport, gradcheck
from volformer.suite import standard_suite


class TestReport:
    def test_passed_is_derived(self):
        rep = GradCheckReport("x", max_rel_error=2e-4, passed=True, tolerance=1e-4)
        assert rep.passed is False  # recomputed from the numbers
        rep = GradCheckReport("x", max_rel_error=5e-5, passed=False, tolerance=1e-4)
        assert rep.passed is True

    def test_row_format(self):
        rep = GradCheckReport("matmul", 1e-9, True, 1e-4)
        assert rep.row().split("\t")[0] == "matmul"
        assert rep.row().endswith("pass")


class TestHarness:
    def test_matmul_near_machine_precision(self):
        rng = np.random.default_rng(0)
        rep = gradcheck(
            "matmul",
            lambda t: ops.sum_(ops.matmul(t[0], t[1])),
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
        )
        assert rep.max_rel_error < 1e-7

    def test_gelu_away_from_zero(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.5, 3.0, size=(4, 4)) * rng.choice([-1.0, 1.0], size=(4, 4))
        rep = gradcheck("gelu", lambda t: ops.sum_(ops.gelu(t[0])), [x])
        assert rep.passed

    def test_softmax_cross_entropy_composite(self):
        rng = np.random.default_rng(2)
        onehot = np.eye(4)[rng.integers(0, 4, size=6)]
        rep = gradcheck(
            "softmax_xent",
            lambda t: ops.scale(ops.sum_(ops.mul(ops.log_softmax(t[0]), t[1])), -1.0),
            [rng.normal(size=(6, 4)), onehot],
        )
        assert rep.passed

    def test_fault_injection_detected(self):
        rng = np.random.default_rng(3)
        rep = gradcheck(
            "matmul_broken",
            lambda t: ops.sum_(ops.matmul(t[0], t[1])),
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
            grad_fault=0.01,
        )
        assert not rep.passed


class TestSuite:
    def test_standard_suite_passes_and_covers_ops(self):
        reports = standard_suite(seed=0)
        assert len(reports) >= 10
        failing = [r.row() for r in reports if not r.passed]
        assert not failing, failing

    def test_suite_fault_injection_fails_everywhere(self):
        reports = standard_suite(seed=0, grad_fault=0.05)
        assert all(not r.passed for r in reports)

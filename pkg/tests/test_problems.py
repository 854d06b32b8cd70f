import json
import math
import subprocess
import sys

import numpy as np
import pytest
from scipy.stats import norm

from lrmis.problems import (
    BranchesParams,
    DuffingParams,
    ExternalProblem,
    ProtocolError,
    branches_cost,
    branches_problem,
    branches_reference_pf,
    duffing_cost,
    duffing_displacement,
    duffing_problem,
    external_problem,
)

STUB = [sys.executable, "-m", "lrmis.cli", "protocol-stub"]


def branches_cost_oracle(x, beta, d):
    # independent literal coding of the four displayed branch expressions
    s = sum(x[i] for i in range(d)) / math.sqrt(d)
    first = sum(x[i] for i in range(d // 2)) / math.sqrt(d)
    second = sum(x[i] for i in range(d // 2, d)) / math.sqrt(d)
    return min(
        beta + s,
        beta - s,
        beta + (first - second),
        beta + (-first + second),
    )


class TestBranches:
    def test_origin(self):
        p = BranchesParams(beta=3.5, dim=40)
        assert branches_cost(np.zeros(40), p) == pytest.approx(3.5, abs=1e-12)

    def test_planted_zero(self):
        d = 40
        p = BranchesParams(beta=3.5, dim=d)
        x = np.full(d, -3.5 / math.sqrt(d))
        assert branches_cost(x, p) == pytest.approx(0.0, abs=1e-12)

    def test_matches_independent_oracle(self):
        rng = np.random.default_rng(0)
        p = BranchesParams(beta=3.5, dim=40)
        x = rng.standard_normal((100, 40))
        got = branches_cost(x, p)
        want = [branches_cost_oracle(row, 3.5, 40) for row in x]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_odd_dimension_rejected(self):
        with pytest.raises(ValueError):
            BranchesParams(beta=3.5, dim=7)

    def test_permutation_within_halves_invariant(self):
        rng = np.random.default_rng(1)
        p = BranchesParams(beta=3.5, dim=12)
        x = rng.standard_normal(12)
        perm = np.concatenate([rng.permutation(6), 6 + rng.permutation(6)])
        assert branches_cost(x, p) == pytest.approx(branches_cost(x[perm], p), abs=1e-12)

    def test_negation_symmetry(self):
        # negating x swaps branches 1<->2 and 3<->4, leaving the min unchanged
        rng = np.random.default_rng(2)
        p = BranchesParams(beta=3.5, dim=20)
        x = rng.standard_normal((50, 20))
        np.testing.assert_allclose(branches_cost(x, p), branches_cost(-x, p), atol=1e-12)

    def test_reference_pf(self):
        p = BranchesParams(beta=3.5, dim=40)
        assert branches_reference_pf(p) == pytest.approx(9.3053e-4, abs=2e-8)
        assert branches_reference_pf(BranchesParams(beta=40.0, dim=4)) < 1e-300

    def test_reference_pf_consistent_with_reported_mc(self):
        # a published MC reference of 9.55e-4 at n=1e6 has 3 SE ~ 9.3e-5
        ours = branches_reference_pf(BranchesParams(beta=3.5, dim=40))
        se = math.sqrt(9.55e-4 * (1 - 9.55e-4) / 1e6)
        assert abs(ours - 9.55e-4) < 3 * se


class TestDuffing:
    def test_linear_case_matches_analytic(self):
        # cubic off, no forcing: underdamped free response
        p = DuffingParams(dim=100, cubic=0.0)
        wn = 2 * math.pi
        zeta = p.damping / (2 * p.mass * wn)
        wd = wn * math.sqrt(1 - zeta**2)
        expected = (p.v0 / wd) * math.exp(-zeta * wn * p.t_max) * math.sin(wd * p.t_max)
        got = duffing_displacement(np.zeros(100), p)
        assert zeta == pytest.approx(0.05, abs=1e-12)
        assert got == pytest.approx(expected, abs=1e-6)

    def test_fine_step_self_convergence_origin(self):
        coarse = duffing_displacement(np.zeros(100), DuffingParams(dim=100, dt=1e-3))
        fine = duffing_displacement(np.zeros(100), DuffingParams(dim=100, dt=1e-5))
        assert abs(coarse - fine) < 1e-6

    def test_halving_dt_self_convergence_random(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(40)
        x *= min(1.0, 3 * math.sqrt(40) / np.linalg.norm(x))
        a = duffing_displacement(x, DuffingParams(dim=40, dt=1e-3))
        b = duffing_displacement(x, DuffingParams(dim=40, dt=5e-4))
        assert abs(a - b) <= 1e-7

    def test_cost_band(self):
        p = DuffingParams(dim=100)
        u = duffing_displacement(np.zeros(100), p)
        f = duffing_cost(np.zeros(100), p)
        assert f == pytest.approx(min(0.1 - u, u + 0.06), abs=1e-15)
        assert f > 0

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(4)
        p = DuffingParams(dim=20)
        x = rng.standard_normal((5, 20))
        batch = duffing_cost(x, p)
        singles = [duffing_cost(row, p) for row in x]
        np.testing.assert_allclose(batch, singles, atol=1e-14)

    def test_dt_must_divide_t_max(self):
        with pytest.raises(ValueError):
            DuffingParams(dim=10, dt=3e-4)

    def test_problem_wrapper(self):
        prob = duffing_problem(dim=10)
        assert prob.dim == 10
        with pytest.raises(ValueError):
            prob.cost(np.zeros((2, 9)))


class TestExternalProtocol:
    def test_stub_matches_inprocess_reference(self):
        with external_problem(STUB + ["--d", "6"], 6, timeout=30.0) as prob:
            rng = np.random.default_rng(5)
            x = rng.standard_normal((100, 6))
            got = prob.cost(x)
        want = 1.0 - np.einsum("nd,nd->n", x, x) / 6
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_out_of_order_responses(self):
        with external_problem(STUB + ["--d", "4", "--shuffle", "16"], 4, timeout=30.0) as prob:
            rng = np.random.default_rng(6)
            x = rng.standard_normal((64, 4))
            got = prob.cost(x)
        want = 1.0 - np.einsum("nd,nd->n", x, x) / 4
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_linear_stub(self):
        with external_problem(
            STUB + ["--d", "3", "--cost", "linear", "--beta", "2.0"], 3, timeout=30.0
        ) as prob:
            x = np.array([[0.5, 1.0, -1.0], [3.0, 0.0, 0.0]])
            np.testing.assert_allclose(prob.cost(x), [1.5, -1.0], atol=1e-12)

    def test_handshake_dimension_mismatch(self):
        with pytest.raises(ProtocolError, match="dimension"):
            external_problem(STUB + ["--d", "4"], 5, timeout=30.0)

    def test_dropped_response_times_out(self):
        # stub that answers every request except the third
        code = (
            "import sys, json\n"
            "print(json.dumps({'protocol': 1, 'd': 2})); sys.stdout.flush()\n"
            "for line in sys.stdin:\n"
            "    m = json.loads(line)\n"
            "    if m.get('close'): break\n"
            "    if m['id'] == 2: continue\n"
            "    print(json.dumps({'id': m['id'], 'f': 1.0})); sys.stdout.flush()\n"
        )
        with pytest.raises(ProtocolError, match="timed out"):
            with external_problem([sys.executable, "-c", code], 2, timeout=2.0) as prob:
                prob.cost(np.zeros((5, 2)))

    def test_malformed_line_errors(self):
        code = (
            "import sys, json\n"
            "print(json.dumps({'protocol': 1, 'd': 2})); sys.stdout.flush()\n"
            "sys.stdin.readline()\n"
            "print('not json at all'); sys.stdout.flush()\n"
            "import time; time.sleep(5)\n"
        )
        with pytest.raises(ProtocolError, match="malformed"):
            with external_problem([sys.executable, "-c", code], 2, timeout=5.0) as prob:
                prob.cost(np.zeros((1, 2)))

    def test_process_exit_reports_stderr(self):
        code = (
            "import sys, json\n"
            "print(json.dumps({'protocol': 1, 'd': 2})); sys.stdout.flush()\n"
            "print('boom: simulated crash', file=sys.stderr)\n"
            "sys.exit(3)\n"
        )
        with pytest.raises(ProtocolError, match="boom"):
            with external_problem([sys.executable, "-c", code], 2, timeout=5.0) as prob:
                prob.cost(np.zeros((2, 2)))

    def test_no_handshake_times_out(self):
        code = "import time; time.sleep(10)\n"
        with pytest.raises(ProtocolError, match="handshake"):
            external_problem([sys.executable, "-c", code], 2, timeout=1.5)

    def test_shutdown_message(self):
        # the stub exits cleanly on {"close": true}
        proc = subprocess.Popen(
            STUB + ["--d", "2"],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
        )
        handshake = json.loads(proc.stdout.readline())
        assert handshake == {"protocol": 1, "d": 2}
        proc.stdin.write(json.dumps({"id": 0, "x": [1.0, 2.0]}) + "\n")
        proc.stdin.flush()
        assert json.loads(proc.stdout.readline())["id"] == 0
        proc.stdin.write(json.dumps({"close": True}) + "\n")
        proc.stdin.flush()
        assert proc.wait(timeout=10) == 0


class TestDuffingPfReference:
    @pytest.mark.slow
    @pytest.mark.xfail(
        strict=True,
        reason=(
            "The displayed oscillator dynamics with all stated constants yield "
            "P_F ~= 1.3e-4 at d=100 (verified against the analytic linear "
            "solution and scipy DOP853), far from the published table value "
            "9.55e-4; see the acceptance suite's self-consistent reference."
        ),
    )
    def test_mc_matches_published_reference(self):
        prob = duffing_problem(dim=100)
        rng = np.random.default_rng(11)
        n = 1_000_000
        fails = 0
        for _ in range(100):
            x = rng.standard_normal((10000, 100))
            fails += int(np.count_nonzero(prob.cost(x) <= 0))
        pf = fails / n
        se = math.sqrt(max(pf, 1e-12) * (1 - pf) / n)
        assert abs(pf - 9.55e-4) <= 3 * se

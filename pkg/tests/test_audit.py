import json

import numpy as np
import pytest

from mmsent import tensor as T
from mmsent.audit import CHECKS, TOLERANCE, run_grad_audit
from mmsent.errors import ContractError
from mmsent.tensor import Tensor, gradient_check


class TestGradAudit:
    def test_every_check_passes(self):
        rows = run_grad_audit(seed=3, trials=2)
        assert [r["name"] for r in rows] == [name for name, *_ in CHECKS]
        for row in rows:
            assert row["ok"], f"{row['name']} at {row['max_rel_err']:.3e}"
            assert row["max_rel_err"] < TOLERANCE

    def test_rows_are_deterministic(self):
        a = run_grad_audit(seed=11, trials=1)
        b = run_grad_audit(seed=11, trials=1)
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_strict_tolerance_flips_ok(self):
        rows = run_grad_audit(seed=3, trials=1, tolerance=0.0)
        assert all(not r["ok"] for r in rows)

    def test_trials_validated(self):
        with pytest.raises(ContractError):
            run_grad_audit(trials=0)

    def test_detects_a_wrong_backward(self):
        """The audit is only trustworthy if a bad gradient actually
        fails it; fake an off-by-one backward and watch it blow up."""
        x = Tensor(np.array([0.7, -0.3, 1.1]), requires_grad=True)

        def loss():
            return T.custom_op(
                np.array((x.data ** 2).sum()), (x,),
                lambda d: np.array((d ** 2).sum()),
                lambda g: (g * (2.0 * x.data + 1.0),),  # gradient is 2x, not 2x+1
                name="bad_square",
            )

        err = gradient_check(loss, {"x": x})
        assert err > 0.1

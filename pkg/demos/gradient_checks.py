"""
Checking the autodiff engine against finite differences
========================================================

Every op, both encoders and the three fused models are evaluated in double
precision and compared with central differences.
"""

import numpy as np

from multifuse import autodiff as ad
from multifuse.autodiff import grad_check
from multifuse.gradsuite import fusion_case, run_suite

# a hand-built graph first
rng = np.random.default_rng(0)
inputs = {"a": rng.standard_normal((4, 4)), "b": rng.standard_normal((4, 4))}
report = grad_check(lambda p: ad.mean(ad.tanh(ad.matmul(p["a"], p["b"]))), inputs, tol=1e-6)
print(f"tanh(a @ b): {report.checked} entries, max relative error {report.max_rel_error:.2e}")

# a whole crossmodal-attention model at toy width
fn, params = fusion_case("crossattn", seed=3)
report = grad_check(fn, params)
print(f"crossattn model: {report.checked} parameters, max relative error {report.max_rel_error:.2e}")

# the op-level suite over a few seeds
results = run_suite(range(3), groups=("op",))
print(f"op suite: {sum(r.report.passed for r in results)}/{len(results)} passed")

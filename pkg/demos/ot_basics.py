"""Balanced and unbalanced Sinkhorn on small problems.

Run with ``python demos/ot_basics.py``.
"""

import numpy as np

from granular_ot import SinkhornConfig, cost_matrix, exact_ot_uniform, ot_distance, sinkhorn, unbalanced_sinkhorn


def main():
    rng = np.random.default_rng(0)

    # Cosine cost between 4 "text" rows and 4 "visual" rows.
    C = cost_matrix(rng.normal(size=(4, 8)), rng.normal(size=(4, 8))).data
    print("cost matrix\n", np.round(C, 3))
    print(f"exact optimum by enumeration: {exact_ot_uniform(C):.4f}")

    # Sharper regularization approaches the exact optimum from above.
    for lam in (0.5, 0.1, 0.02):
        plan = sinkhorn(C, cfg=SinkhornConfig(lam=lam, iterations=1000))
        print(f"lambda {lam:<5} distance {ot_distance(plan, C):.4f}  violation {plan.marginal_violation:.1e}")

    # The default budget; see the README on small problems that need more.
    plan = sinkhorn(C, cfg=SinkhornConfig(lam=0.1, iterations=100))
    print(f"100 iterations at lambda 0.1: violation {plan.marginal_violation:.1e}")

    # Relaxing the marginals frees the total mass; stiff penalties recover the balanced answer.
    for rho in (0.1, 1.0, 1e3):
        uot = unbalanced_sinkhorn(C, cfg=SinkhornConfig(lam=0.1, uot=(rho, rho)))
        print(f"rho {rho:<6g} mass {uot.mass:.4f}  distance {ot_distance(uot, C):.4f}")


if __name__ == "__main__":
    main()

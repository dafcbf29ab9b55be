# %% [markdown]
# # Linearization, adjoint and gradient
#
# Perturbing the control from u towards v moves the state by roughly theta K
# and the likelihood by roughly theta R. The adjoint runs backward and turns
# that into a gradient with one extra sweep, whatever the number of
# parameters.

# %%
import warnings

import numpy as np

from cmfsde import (LinearPolicy, RngStream, TimeGrid, builtin_model, duality_check,
                    smp_gradient, solve_adjoint, solve_coupled, solve_variational)
from cmfsde.validation import variational

warnings.simplefilter("ignore", RuntimeWarning)  # ridge note at the first regression step

grid = TimeGrid(1.0, 50)
c = builtin_model("bounded_sigmoid")
u = LinearPolicy.constant(0.0)
v = LinearPolicy.constant(0.8)
stream = RngStream(5)

# %% [markdown]
# Difference quotients approach K linearly in theta.

# %%
rep = variational(c, u, v, grid, 32, 1000, stream)
print(" theta   state error   conditional-mean error")
for th, ex, eu in rep.tables["errors"]:
    print(f"{th:6.3f}   {ex:.3e}     {eu:.3e}")

# %% [markdown]
# Directional derivative three ways: the tangent sweep, the adjoint side and
# Richardson-extrapolated finite differences on common noise.

# %%
ens = solve_coupled(c, u, grid, 32, 1000, stream)
adj = solve_adjoint(c, u, None, ens)
d = duality_check(c, u, v, ens, adj, stream)
print(f"tangent {d.tangent_derivative:.6f}  adjoint {d.adjoint_derivative:.6f}  "
      f"FD {d.fd_derivative:.6f}")
print(f"terminal pairing {d.terminal_pairing:.6f} + running {d.running_linearization:.6f}")

# %% [markdown]
# Gradient of J in the four coefficients of a feature policy.

# %%
w = LinearPolicy((0.2, 0.3, -0.2, 0.4), ("const", "y", "int_y", "ewma"))
ens = solve_coupled(c, w, grid, 32, 1000, stream)
adj = solve_adjoint(c, w, None, ens)
g = smp_gradient(c, w, None, ens, adj, fd=True, stream=stream)
print("adjoint  ", np.round(g.gradient, 5))
print("central  ", np.round(g.fd_gradient, 5))
print(f"cosine {g.cosine:.5f}, relative error {g.relative_error:.4f}")
print("unexplained share of the multiplier, first steps:",
      np.round(adj.unexplained_fraction[:5], 3))

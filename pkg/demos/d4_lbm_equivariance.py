"""Rotate a microstructure, re-solve the flow, and compare with the rotated tensor.

A permeability tensor K measured on an image I must satisfy
K(g.I) = P_g K(I) P_g^T for every element g of the square's symmetry group.
The LBM solver knows nothing about the group, so this is an end-to-end check
of both the solver and the pixel/tensor conventions.

    python3 demos/d4_lbm_equivariance.py
"""

import numpy as np

from permtensor import d4
from permtensor.lbm import lbm_permeability
from permtensor.microstructure import fill_isolated_pores, generate_microstructure, percolates

seed = 3
while True:
    img = fill_isolated_pores(generate_microstructure(seed, 32, 2.0, 0.7))
    if all(percolates(img)):
        break
    seed += 1

k = lbm_permeability(img)
print(f"seed {seed}  K = [[{k.kxx:.4f}, {k.kxy:.4f}], [{k.kyx:.4f}, {k.kyy:.4f}]]")
print(f"{'element':>8} {'max |K(gI) - g.K(I)| / |K|':>30}")
scale = np.abs(k.as_vector()).max()
for g in d4.ELEMENTS:
    direct = lbm_permeability(d4.transform_image(img, g)).as_vector()
    rotated = d4.transform_tensor(k, g).as_vector()
    print(f"{g.tag:>8} {np.abs(direct - rotated).max() / scale:30.2e}")

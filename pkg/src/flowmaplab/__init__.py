"""flowmaplab: a desk-scale laboratory for flow-map distillation.

Analytic Gaussian-world oracles, mixture teachers with exact posterior
velocities, a tiny MLP flow map with forward-mode (dual-number) JVPs and
reverse-mode parameter gradients, the distillation objectives that train it,
multi-step samplers, and Wasserstein-2 evaluation.
"""

__version__ = "0.1.0"

"""Two-level distributed MPC for multi-zone HVAC: plant model, solvers, controllers, surfaces."""

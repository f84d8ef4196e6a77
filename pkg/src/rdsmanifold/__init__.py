"""Stable and unstable random invariant manifolds by the Lyapunov-Perron method."""

"""Learned subspace MMSE channel estimation for 2D antenna arrays."""
__version__ = "0.1.0"

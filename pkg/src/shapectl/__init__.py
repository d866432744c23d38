"""Learned energy shaping and damping injection for port-Hamiltonian systems.

Controllers are small neural networks trained through exact adjoint
gradients of closed-loop trajectory costs.
"""
__version__ = "0.1.0"

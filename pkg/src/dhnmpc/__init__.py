"""Economic nonlinear MPC for district heating networks with prosumers and storage."""

__version__ = "0.1.0"

"""Boundary layer tails of periodic fully nonlinear elliptic problems in half-spaces."""

__version__ = "0.1.0"

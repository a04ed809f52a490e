"""High-order Q^k finite element solver for relaxed JKO schemes.

Modules: ``fem`` (quadrature, spaces, operators), ``physics`` (energies,
mobilities, reaction networks, convolution), ``linsolve`` (Step-A solvers),
``alg2`` (scalar ALG2 loop), ``system`` (reaction-diffusion systems),
``scenarios``, ``config``, ``driver`` and ``cli``.
"""

__version__ = "0.1.0"

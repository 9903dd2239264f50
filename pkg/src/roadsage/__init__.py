"""Road-type classification on road-network line graphs with GraphSAGE.

Modules: ``graph`` (primal/dual graphs and I/O), ``segmentation``,
``raster`` (grids, footprints, histograms), ``features``, ``sage``
(numpy GraphSAGE), ``experiment`` (protocol and metrics), ``synth``
(synthetic city generator) and ``cli``.
"""

__version__ = "0.1.0"

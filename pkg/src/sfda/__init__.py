"""Source-free domain adaptation on small numpy networks.

Modules: ``nn`` (micro networks), ``graph`` (mutual k-NN affinities),
``pseudo`` (teacher pseudo-labels), ``methods`` (adaptation baselines and
NOTELA), ``metrics``, ``bench`` (synthetic shifted domains), ``slicer``
(audio peak slicing) and ``cli``.
"""

__version__ = "0.1.0"

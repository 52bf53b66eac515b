"""Station demand forecasting with learned buffer control.

Subsystems:

* :mod:`opcomm.demand` -- synthetic station demand and the asymmetric
  under/over-buffering reward.
* :mod:`opcomm.features` -- temporal/lag/rolling feature construction.
* :mod:`opcomm.gbt` -- histogram gradient-boosted regression trees plus a
  seasonal-naive baseline.
* :mod:`opcomm.env` -- the daily forecast -> buffer -> demand -> reward
  episode environment.
* :mod:`opcomm.ppo` -- clipped-surrogate policy optimization over the
  discrete buffer grid.
* :mod:`opcomm.metrics` -- WAPE and incident-rate reporting.
* :mod:`opcomm.insight` -- exact Shapley attributions, buffer scenario
  sweeps, and templated summaries.
* :mod:`opcomm.cli` -- the ``opcomm`` pipeline command.
"""

__version__ = "0.1.0"

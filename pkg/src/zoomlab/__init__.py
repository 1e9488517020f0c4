"""Desk-scale laboratory for staged knowledge injection on synthetic glyph grids.

The package has four layers:

* task substrate: ``rules`` (shared decision rules), ``scenegen`` (glyph-grid
  scenes with coarse/zoom views), ``vocab`` (shared token inventory);
* data forging: ``qaforge`` (knowledge-graph-verified text QA), ``encoding``
  (token-level training examples, scripted tool demonstrations);
* learning: ``policy`` (tiny windowed MLP language policy), ``rollout``
  (tool-augmented episodes), ``reward`` (gated verifiable reward), ``train``
  (SFT and group-relative policy optimization);
* experiments: ``evalkit`` (pass@k), ``runner`` (arm matrix), ``cli``.
"""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, NumericError

__all__ = ["ConfigError", "ContractError", "NumericError", "__version__"]

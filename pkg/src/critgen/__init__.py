"""critgen: multimodal safety-critical scenario generation.

Learns a conditional normalizing flow over scenario parameters of a
black-box decision system via weighted maximum likelihood, feeds it with an
adaptive black-box-gradient sampler, and evaluates systems by sampling
risk-graded scenarios.
"""

__version__ = "0.1.0"

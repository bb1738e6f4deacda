"""Level-distribution supervision for image copy detection against generated replicas.

Submodules
----------
levelpdf     integer level -> discrete supervision pdf (gaussian, linear, exponential)
encoder      numpy patch transformer with N+1 class tokens and analytic gradients
objectives   KL and the competing batch losses
training     minibatch SGD with a cosine schedule
protocols    PCC, RD, per-pair deviations, replication ratio
gallery      binary vector-set store and exhaustive multi-vector matcher
synthgen     synthetic pair generator, IMGF images, JSONL annotations
checkpoint   binary parameter files
cli          ``pdfembed`` command line
"""

__version__ = "0.1.0"

"""Personal health-state estimation.

Modules
-------
personicle
    Timestamped streams, events, CSV ingestion, geo context and the on-disk store.
rules
    The interface-event rule language: parser, pretty-printer, detectors and evaluation.
metrics
    Athlete profile and load metrics (CTL, TRIMP, CP curve, GOVSS, VAM, exposure, ...).
gnb
    Graph-nested blocks: nodes, edges, nested sub-networks and the update cycle.
knowledge
    Knowledge files, lamina matching, block instantiation, patches and regions of interest.
learner
    Data-driven edits: parallel-observation fits, VAM models, fusion and memory sweeps.
cli
    The ``hse`` command-line tool.
"""

__version__ = "0.1.0"

"""Dynamic point-cloud geometry coding with multiscale sparse representations
and inter conditional occupancy modelling."""

__version__ = "0.1.0"

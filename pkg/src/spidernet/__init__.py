"""SpiderNet: 1-D convolutional fraud scoring on tabular records, from scratch in numpy."""

__version__ = "0.1.0"

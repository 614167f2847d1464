"""Command-line harness: training, evaluation, gradient checks, ablations, profiling."""

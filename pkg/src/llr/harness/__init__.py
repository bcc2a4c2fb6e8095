"""Data, checkpoints, configs, loss surfaces, sweeps and the command line."""

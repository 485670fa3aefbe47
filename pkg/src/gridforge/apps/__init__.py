"""Demo applications and benchmarks built on the grid library."""

"""Multi-objective random-forest active-learning auto-tuner."""

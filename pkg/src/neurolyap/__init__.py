"""Neural Lyapunov control: training and sound verification."""

# Auto-decoder optimisation

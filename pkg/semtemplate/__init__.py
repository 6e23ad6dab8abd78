# Semantic-aware implicit template learning
__version__ = "1.0.0"

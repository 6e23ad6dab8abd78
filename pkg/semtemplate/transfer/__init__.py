# Correspondence-based attribute transfer and its metrics

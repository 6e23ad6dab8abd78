# Sampling, spatial queries and isosurfaces

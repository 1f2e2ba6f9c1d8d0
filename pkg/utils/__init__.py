# Geometry, synthetic world, objectives, metrics and storage

# Diffusion prior, score distillation and the joint optimizer

# Objectives, optimizers and the bootstrapped update

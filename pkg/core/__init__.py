# Pooling, autodiff and training core

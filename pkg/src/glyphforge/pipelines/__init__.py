"""Training stages, sampling, inference pipelines and external clients."""

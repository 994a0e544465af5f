"""IO helpers: records, manifests and checkpoints"""

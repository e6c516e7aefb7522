"""
Fine-grained alignment heads trained on precomputed component embeddings.
"""

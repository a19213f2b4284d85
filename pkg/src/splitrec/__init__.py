"""Next-item recommender that routes each history into preference threads
with a learned allocator and models every thread with its own GRU state."""

__version__ = "0.1.0"

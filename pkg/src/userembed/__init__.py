"""User-embedding training and serving testbed.

Trains a pyramid user tower on a synthetic drifting click stream, publishes
versioned snapshots through recurring updates, and serves the resulting
embeddings to a small downstream ranker under four schemes (frozen, offline
batch, realtime, async write-behind), measuring staleness, embedding shift,
and normalized entropy.
"""

__version__ = "0.1.0"

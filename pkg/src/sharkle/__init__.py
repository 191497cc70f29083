"""Shared-memory analytics runtime: pool allocator, shuffle engine, off-heap store."""

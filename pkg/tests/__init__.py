"""
Test package for the flexfl simulator and allocator.
"""

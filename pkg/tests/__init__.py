"""
Test package for crowdcount.
"""

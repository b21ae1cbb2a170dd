"""Desk-scale synthetic detection pipeline used to exercise the assignment end to end."""

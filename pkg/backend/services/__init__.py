"""
Services package for the Parsec protocol, channel nodes, escrow and simulation.
"""

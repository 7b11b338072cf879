"""
Parsec State Channel Simulator
Off-chain payment channels over a partitioned event log, settled through a simulated escrow contract.
NOTE: Package initialization; modules import each other flat from backend/
"""

__version__ = "1.0.0"
__author__ = "Parsec Team"
__description__ = "Parsec state channel nodes, escrow contract and deterministic simulator"

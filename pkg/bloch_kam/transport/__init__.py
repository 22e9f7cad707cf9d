"""Quantum and classical energy-velocity measures and their comparison"""

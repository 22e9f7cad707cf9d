"""Invariant tori, Diophantine tests and KAM volume scans"""

"""Potential ingestion from built-ins, coefficient tables and grid samples"""

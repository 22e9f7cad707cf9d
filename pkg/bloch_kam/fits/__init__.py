"""Scaling fits using statsmodels"""

"""Renderers module for output formatting using rich"""

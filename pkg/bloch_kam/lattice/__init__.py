"""Lattices, Fourier series and the ballistic rescaling"""

"""Bloch fiber assembly, band spectra and Weyl counts"""

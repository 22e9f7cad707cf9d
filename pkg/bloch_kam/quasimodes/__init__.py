"""WKB quasimodes on KAM tori and spectral matching"""

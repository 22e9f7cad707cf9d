"""Tests for bloch-kam"""

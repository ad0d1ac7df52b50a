"""Homogeneous binary MERA optimization through its transfer superoperator."""

"""Core Module - numerical services for the IPGP toolkit"""

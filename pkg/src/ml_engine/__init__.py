"""ML Engine - Kedro pipelines for the IPGP toolkit"""

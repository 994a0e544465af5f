"""Evaluation engines: uncertainty, metrics, scenarios and the GP oracle"""

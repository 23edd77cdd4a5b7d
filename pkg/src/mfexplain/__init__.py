"""Interpretable matrix-factorization recommender with LLM explanations."""

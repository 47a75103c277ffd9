"""
Deposition models, Markov chain construction, solvers and analysis.
"""

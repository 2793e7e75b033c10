"""File storage for series, checkpoints and reports"""

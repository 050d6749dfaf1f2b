"""Command implementations, grid sweeps and plot emission"""

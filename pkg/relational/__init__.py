"""Memory queue, relation distributions, losses and the EMA update"""

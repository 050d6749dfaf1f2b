"""Dataset acquisition, packing and batch iteration"""

"""Linear probing, kNN evaluation and embedding export"""

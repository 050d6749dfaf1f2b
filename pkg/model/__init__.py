"""Encoder, heads and the student/teacher pair"""

"""Shared configuration, domain models and on-disk stores"""

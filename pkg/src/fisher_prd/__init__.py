"""Asynchronous proportional response dynamics in linear Fisher markets."""

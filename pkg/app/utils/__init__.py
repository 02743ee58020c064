"""
evortho - Utilities

Geodesy, camera geometry, validity timelines, CSV/image I/O, stage log.
"""

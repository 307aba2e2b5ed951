"""File formats, checksums and validators"""

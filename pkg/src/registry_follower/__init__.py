"""Continual package-registry follower.

Consumes a CouchDB-style changes feed, archives package metadata and code
tarballs (preserving deleted entities), scrapes advisories and download
metrics, and ships a small library of dependency analyses.
"""

__version__ = "0.1.0"

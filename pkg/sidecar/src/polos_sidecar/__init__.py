"""Encoder sidecar: turns raw images and captions into embedding bundles
consumed by the metric package through the PEB file format."""

from polos_sidecar.encode import EncodeError, EncodePolicy, encode_manifest, read_manifest
from polos_sidecar.encoders import EncoderError, HashEncoder, make_encoder
from polos_sidecar.peb import PebError, Record, read_dims, read_records, write_records

__version__ = "0.1.0"

__all__ = [
    "EncodeError",
    "EncodePolicy",
    "EncoderError",
    "HashEncoder",
    "PebError",
    "Record",
    "encode_manifest",
    "make_encoder",
    "read_dims",
    "read_manifest",
    "read_records",
    "write_records",
]

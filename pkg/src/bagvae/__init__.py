"""Distantly supervised relation extraction with a sentence VAE and knowledge-base priors."""

__version__ = "0.1.0"

"""Small vision-language pipeline: tiling, pixel shuffle, chat rendering, a toy VLM and budget maths."""

__version__ = "0.1.0"

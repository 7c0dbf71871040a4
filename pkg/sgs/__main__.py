"""Allow running SGS as a module: python -m sgs"""
from sgs.cli import main

main()

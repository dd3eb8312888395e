import os
import sys

# Modules import each other by bare name; keep that working for the installed `src` package
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

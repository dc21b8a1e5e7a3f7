# Implicit graph neural network package
import os
import sys

# Modules import each other by bare name.
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

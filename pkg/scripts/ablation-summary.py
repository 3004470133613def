import os, sys
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from src.ablation import summarize

csv_path = sys.argv[1]
if not os.path.isfile(csv_path):
    raise FileNotFoundError(f"No or invalid path to ablation CSV file")
results = pd.read_csv(csv_path)
summary = summarize(results)
with pd.option_context("display.float_format", "{:.3f}".format):
    print(summary.to_string())

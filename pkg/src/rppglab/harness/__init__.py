"""Dataset generation, experiment orchestration, file formats and reports."""

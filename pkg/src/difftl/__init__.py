"""Differential transfer learning: truncation, coarsening and selective finetuning of CNN backbones."""

"""Desk-scale instruction fine-tuning: packing with response-only loss, full and LoRA
training, zero-shot multiple-choice evaluation and benchmark decontamination."""

__version__ = "0.1.0"

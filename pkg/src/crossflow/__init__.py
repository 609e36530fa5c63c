"""Few-shot LoRA adaptation of a flow-matching translator, LPIPS adapter selection and a detection-transfer study."""

__version__ = "0.1.0"

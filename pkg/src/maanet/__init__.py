"""MAA-Net: attribute-guided attention classifier for ultrasound nodules, on a small numpy autodiff engine."""

__version__ = "0.1.0"

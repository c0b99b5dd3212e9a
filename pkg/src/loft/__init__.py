"""Local-frequency transformer blocks for image deblurring, in NumPy."""

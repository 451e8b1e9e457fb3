"""Closed multi-class product-form networks under large populations."""

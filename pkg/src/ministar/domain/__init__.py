"""Network, losses and league bookkeeping."""

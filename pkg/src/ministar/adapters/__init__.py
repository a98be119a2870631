"""File, wire and plot formats."""

"""Game engine and scripted bots."""

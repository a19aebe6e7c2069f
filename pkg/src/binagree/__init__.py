"""Agreement analysis for paired repeated binary measurements."""

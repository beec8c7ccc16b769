"""Forest point-cloud registration from stem positions."""

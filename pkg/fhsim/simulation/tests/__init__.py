# Tests for the simulation app

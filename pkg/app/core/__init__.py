# Core settings, errors and seeded random streams
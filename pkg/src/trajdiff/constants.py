"""Physical constants and scaling conventions (SI units)."""

# IAU 2009/2012 values.
MU_SUN = 1.32712440018e20   # Sun gravitational parameter, m^3/s^2
AU = 1.495978707e11         # astronomical unit, m

# Heliocentric scaling rule of thumb: positions by 1 AU, velocities by 30 km/s.
POS_SCALE = AU              # m
VEL_SCALE = 30_000.0        # m/s

DAY = 86_400.0              # s

"""Derive independent component seeds from one master seed (splitmix64)."""

_MASK = 0xFFFFFFFFFFFFFFFF


def splitmix64(state):
    """Return ``(next_state, output)`` of one splitmix64 step."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


COMPONENTS = ("data", "embed", "init", "shuffle")


def derive_seeds(master, components=COMPONENTS):
    """Map each component name to a 63-bit seed, in a fixed order."""
    state = int(master) & _MASK
    out = {}
    for name in components:
        state, z = splitmix64(state)
        out[name] = z >> 1
    return out

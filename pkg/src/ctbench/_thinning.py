"""Sequential 3-D thinning by simple-point peeling.

A border voxel may be deleted only if it is *simple*: exactly one
26-connected foreground component in its 26-neighborhood and exactly one
6-connected background component among its 18-neighborhood touching a face
neighbor (Bertrand-Malandain characterization). Curve endpoints (<= 1
foreground neighbor) are kept, so tubes thin to centerline curves. Deletions
happen one by one in a fixed scan order over six face directions, which makes
the result deterministic and the topology preservation unconditional.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _count26(fg, x, y, z):
    n = 0
    for dz in range(-1, 2):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                if fg[x + dx, y + dy, z + dz]:
                    n += 1
    return n


@njit(cache=True)
def _is_simple(fg, x, y, z):
    # local 3x3x3 copy, center masked out
    nb = np.zeros(27, dtype=np.uint8)
    idx = 0
    for dz in range(-1, 2):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                if fg[x + dx, y + dy, z + dz]:
                    nb[idx] = 1
                idx += 1
    nb[13] = 0  # center

    # T26: one 26-component of foreground in the punctured neighborhood
    visited = np.zeros(27, dtype=np.uint8)
    stack = np.empty(27, dtype=np.int64)
    comp26 = 0
    for start in range(27):
        if nb[start] == 1 and visited[start] == 0:
            comp26 += 1
            if comp26 > 1:
                return False
            top = 0
            stack[top] = start
            top += 1
            visited[start] = 1
            while top > 0:
                top -= 1
                c = stack[top]
                cx = c % 3
                cy = (c // 3) % 3
                cz = c // 9
                for dz in range(-1, 2):
                    nz_ = cz + dz
                    if nz_ < 0 or nz_ > 2:
                        continue
                    for dy in range(-1, 2):
                        ny_ = cy + dy
                        if ny_ < 0 or ny_ > 2:
                            continue
                        for dx in range(-1, 2):
                            nx_ = cx + dx
                            if nx_ < 0 or nx_ > 2:
                                continue
                            o = nx_ + 3 * ny_ + 9 * nz_
                            if nb[o] == 1 and visited[o] == 0:
                                visited[o] = 1
                                stack[top] = o
                                top += 1
    if comp26 != 1:
        return False

    # T6: one 6-component of background within the 18-neighborhood that
    # touches a face neighbor of the center.
    in18 = np.zeros(27, dtype=np.uint8)
    for c in range(27):
        if c == 13:
            continue
        m = abs(c % 3 - 1) + abs((c // 3) % 3 - 1) + abs(c // 9 - 1)
        if m <= 2:
            in18[c] = 1
    visited[:] = 0
    comp6 = 0
    for start in range(27):
        if in18[start] == 1 and nb[start] == 0 and visited[start] == 0:
            ms = abs(start % 3 - 1) + abs((start // 3) % 3 - 1) + abs(start // 9 - 1)
            if ms != 1:
                continue  # grow components only from face neighbors
            comp6 += 1
            if comp6 > 1:
                return False
            top = 0
            stack[top] = start
            top += 1
            visited[start] = 1
            while top > 0:
                top -= 1
                c = stack[top]
                cx = c % 3
                cy = (c // 3) % 3
                cz = c // 9
                for k in range(6):
                    if k == 0:
                        nx_, ny_, nz_ = cx + 1, cy, cz
                    elif k == 1:
                        nx_, ny_, nz_ = cx - 1, cy, cz
                    elif k == 2:
                        nx_, ny_, nz_ = cx, cy + 1, cz
                    elif k == 3:
                        nx_, ny_, nz_ = cx, cy - 1, cz
                    elif k == 4:
                        nx_, ny_, nz_ = cx, cy, cz + 1
                    else:
                        nx_, ny_, nz_ = cx, cy, cz - 1
                    if nx_ < 0 or nx_ > 2 or ny_ < 0 or ny_ > 2 or nz_ < 0 or nz_ > 2:
                        continue
                    o = nx_ + 3 * ny_ + 9 * nz_
                    if in18[o] == 1 and nb[o] == 0 and visited[o] == 0:
                        visited[o] = 1
                        stack[top] = o
                        top += 1
    return comp6 == 1


@njit(cache=True)
def thin_padded(fg):
    """Peel the padded boolean array in place until stable.

    Each directional subpass first collects its border candidates against the
    frozen state (so at most one voxel layer per direction per cycle), then
    deletes them one by one, re-verifying simplicity against the live array.
    """
    nx, ny, nz = fg.shape
    dirs = np.array(
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
        dtype=np.int64,
    )
    cand = np.empty(nx * ny * nz, dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for d in range(6):
            dx, dy, dz = dirs[d, 0], dirs[d, 1], dirs[d, 2]
            ncand = 0
            for z in range(1, nz - 1):
                for y in range(1, ny - 1):
                    for x in range(1, nx - 1):
                        if not fg[x, y, z]:
                            continue
                        if fg[x + dx, y + dy, z + dz]:
                            continue  # not a border point for this direction
                        cand[ncand] = x + nx * (y + ny * z)
                        ncand += 1
            for i in range(ncand):
                c = cand[i]
                x = c % nx
                y = (c // nx) % ny
                z = c // (nx * ny)
                if not fg[x, y, z]:
                    continue
                if _count26(fg, x, y, z) < 2:
                    continue  # keep curve endpoints and isolated voxels
                if _is_simple(fg, x, y, z):
                    fg[x, y, z] = False
                    changed = True
    return fg


def thin(bits: np.ndarray) -> np.ndarray:
    """Skeleton of a boolean volume; always a subset of the input."""
    padded = np.zeros(tuple(s + 2 for s in bits.shape), dtype=bool)
    padded[1:-1, 1:-1, 1:-1] = bits
    thin_padded(padded)
    return padded[1:-1, 1:-1, 1:-1]

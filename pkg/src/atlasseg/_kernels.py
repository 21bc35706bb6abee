"""Numba-compiled inner loops (trilinear gathers, Gauss-Seidel relaxation).

Everything here operates on raw ndarrays; the domain types live in
:mod:`atlasseg.grid`.  Kernels are compiled per dtype on first use and
cached on disk, so repeated test runs pay the JIT cost once.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def sample_scalar(data, ox, oy, oz, sx, sy, sz, pts, background, clamp, out):
    """Trilinear sampling of a scalar grid at physical points.

    clamp=True clamps to the edge; clamp=False returns `background`
    outside the hull of voxel centers.
    """
    nx, ny, nz = data.shape
    for p in range(pts.shape[0]):
        gx = (pts[p, 0] - ox) / sx
        gy = (pts[p, 1] - oy) / sy
        gz = (pts[p, 2] - oz) / sz
        if clamp:
            if gx < 0.0:
                gx = 0.0
            elif gx > nx - 1:
                gx = nx - 1.0
            if gy < 0.0:
                gy = 0.0
            elif gy > ny - 1:
                gy = ny - 1.0
            if gz < 0.0:
                gz = 0.0
            elif gz > nz - 1:
                gz = nz - 1.0
        elif (gx < 0.0 or gx > nx - 1 or gy < 0.0 or gy > ny - 1
              or gz < 0.0 or gz > nz - 1):
            out[p] = background
            continue
        i0 = int(np.floor(gx))
        j0 = int(np.floor(gy))
        k0 = int(np.floor(gz))
        if i0 > nx - 2:
            i0 = nx - 2
        if j0 > ny - 2:
            j0 = ny - 2
        if k0 > nz - 2:
            k0 = nz - 2
        if i0 < 0:
            i0 = 0
        if j0 < 0:
            j0 = 0
        if k0 < 0:
            k0 = 0
        fx = gx - i0
        fy = gy - j0
        fz = gz - k0
        i1 = i0 + 1 if nx > 1 else i0
        j1 = j0 + 1 if ny > 1 else j0
        k1 = k0 + 1 if nz > 1 else k0
        if nx == 1:
            fx = 0.0
        if ny == 1:
            fy = 0.0
        if nz == 1:
            fz = 0.0
        c00 = data[i0, j0, k0] * (1 - fx) + data[i1, j0, k0] * fx
        c10 = data[i0, j1, k0] * (1 - fx) + data[i1, j1, k0] * fx
        c01 = data[i0, j0, k1] * (1 - fx) + data[i1, j0, k1] * fx
        c11 = data[i0, j1, k1] * (1 - fx) + data[i1, j1, k1] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out[p] = c0 * (1 - fz) + c1 * fz


@njit(cache=True)
def sample_vector(data, ox, oy, oz, sx, sy, sz, pts, clamp, out):
    """Trilinear sampling of a 3-vector grid; clamp-to-edge boundary."""
    nx, ny, nz = data.shape[:3]
    for p in range(pts.shape[0]):
        gx = (pts[p, 0] - ox) / sx
        gy = (pts[p, 1] - oy) / sy
        gz = (pts[p, 2] - oz) / sz
        if clamp:
            if gx < 0.0:
                gx = 0.0
            elif gx > nx - 1:
                gx = nx - 1.0
            if gy < 0.0:
                gy = 0.0
            elif gy > ny - 1:
                gy = ny - 1.0
            if gz < 0.0:
                gz = 0.0
            elif gz > nz - 1:
                gz = nz - 1.0
        elif (gx < 0.0 or gx > nx - 1 or gy < 0.0 or gy > ny - 1
              or gz < 0.0 or gz > nz - 1):
            out[p, 0] = 0.0
            out[p, 1] = 0.0
            out[p, 2] = 0.0
            continue
        i0 = int(np.floor(gx))
        j0 = int(np.floor(gy))
        k0 = int(np.floor(gz))
        if i0 > nx - 2:
            i0 = nx - 2
        if j0 > ny - 2:
            j0 = ny - 2
        if k0 > nz - 2:
            k0 = nz - 2
        if i0 < 0:
            i0 = 0
        if j0 < 0:
            j0 = 0
        if k0 < 0:
            k0 = 0
        fx = gx - i0
        fy = gy - j0
        fz = gz - k0
        i1 = i0 + 1 if nx > 1 else i0
        j1 = j0 + 1 if ny > 1 else j0
        k1 = k0 + 1 if nz > 1 else k0
        if nx == 1:
            fx = 0.0
        if ny == 1:
            fy = 0.0
        if nz == 1:
            fz = 0.0
        for c in range(3):
            c00 = data[i0, j0, k0, c] * (1 - fx) + data[i1, j0, k0, c] * fx
            c10 = data[i0, j1, k0, c] * (1 - fx) + data[i1, j1, k0, c] * fx
            c01 = data[i0, j0, k1, c] * (1 - fx) + data[i1, j0, k1, c] * fx
            c11 = data[i0, j1, k1, c] * (1 - fx) + data[i1, j1, k1, c] * fx
            c0 = c00 * (1 - fy) + c10 * fy
            c1 = c01 * (1 - fy) + c11 * fy
            out[p, c] = c0 * (1 - fz) + c1 * fz


@njit(cache=True)
def _div_forward(u, i, j, k, ihx, ihy, ihz):
    # forward-difference divergence with mirrored (Neumann) far boundary
    nx, ny, nz = u.shape[:3]
    d = 0.0
    if i + 1 < nx:
        d += (u[i + 1, j, k, 0] - u[i, j, k, 0]) * ihx
    if j + 1 < ny:
        d += (u[i, j + 1, k, 1] - u[i, j, k, 1]) * ihy
    if k + 1 < nz:
        d += (u[i, j, k + 1, 2] - u[i, j, k, 2]) * ihz
    return d


@njit(cache=True)
def elastic_halfsweep(u, rhs, tau, mu, lam_mu, hx, hy, hz, comp, parity):
    """One red-black Gauss-Seidel pass for one component of the
    semi-implicit elastic step (I + tau*A) u = rhs.

    A is the gradient of the discrete elastic energy
    sum (lam+mu)/2 div(u)^2 + mu/2 |grad u_i|^2 with forward differences
    and Neumann boundaries.  Sites of one checkerboard color and one
    component do not couple through A, so the simultaneous update below
    is an exact block Gauss-Seidel step (energy monotone).
    """
    nx, ny, nz = u.shape[:3]
    ihx = 1.0 / hx
    ihy = 1.0 / hy
    ihz = 1.0 / hz
    ihx2 = ihx * ihx
    ihy2 = ihy * ihy
    ihz2 = ihz * ihz
    if comp == 0:
        ihc = ihx
        ihc2 = ihx2
    elif comp == 1:
        ihc = ihy
        ihc2 = ihy2
    else:
        ihc = ihz
        ihc2 = ihz2
    c = comp
    for i in range(nx):
        for j in range(ny):
            for k in range((i + j + parity) % 2, nz, 2):
                lap = 0.0
                diag = 0.0
                if i + 1 < nx:
                    lap += (u[i + 1, j, k, c] - u[i, j, k, c]) * ihx2
                    diag += mu * ihx2
                if i - 1 >= 0:
                    lap += (u[i - 1, j, k, c] - u[i, j, k, c]) * ihx2
                    diag += mu * ihx2
                if j + 1 < ny:
                    lap += (u[i, j + 1, k, c] - u[i, j, k, c]) * ihy2
                    diag += mu * ihy2
                if j - 1 >= 0:
                    lap += (u[i, j - 1, k, c] - u[i, j, k, c]) * ihy2
                    diag += mu * ihy2
                if k + 1 < nz:
                    lap += (u[i, j, k + 1, c] - u[i, j, k, c]) * ihz2
                    diag += mu * ihz2
                if k - 1 >= 0:
                    lap += (u[i, j, k - 1, c] - u[i, j, k, c]) * ihz2
                    diag += mu * ihz2
                bdiv = 0.0
                ic = i + 1 if c == 0 else i
                jc = j + 1 if c == 1 else j
                kc = k + 1 if c == 2 else k
                if ic < nx and jc < ny and kc < nz:
                    bdiv += _div_forward(u, i, j, k, ihx, ihy, ihz) * ihc
                    diag += lam_mu * ihc2
                ib = i - 1 if c == 0 else i
                jb = j - 1 if c == 1 else j
                kb = k - 1 if c == 2 else k
                if ib >= 0 and jb >= 0 and kb >= 0:
                    bdiv -= _div_forward(u, ib, jb, kb, ihx, ihy, ihz) * ihc
                    diag += lam_mu * ihc2
                au = -mu * lap - lam_mu * bdiv
                res = rhs[i, j, k, c] - u[i, j, k, c] - tau * au
                u[i, j, k, c] += res / (1.0 + tau * diag)

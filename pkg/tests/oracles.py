"""
Independent reference implementations for the tests.

Nothing here imports the package: operators are built with explicit
Kronecker products in a big-endian layout (site 0 is the leftmost factor)
and then reordered to the package convention (site 0 least significant),
and the steady state is the SVD null vector of the column-stacked
Liouvillian superoperator.
"""

import numpy as np

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)   # in (up, down) order
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
SM = np.array([[0, 0], [1, 0]], dtype=complex)      # |down><up| in (up, down) order
I2 = np.eye(2, dtype=complex)


def _kron_site(op, site, n):
    out = np.array([[1.0 + 0j]])
    for k in range(n):
        out = np.kron(out, op if k == site else I2)
    return out


def _to_package_basis(n):
    # big-endian (up, down) index -> package index (site 0 = LSB, bit 1 = up)
    perm = np.empty(2 ** n, dtype=int)
    for idx in range(2 ** n):
        bits = [(idx >> (n - 1 - k)) & 1 for k in range(n)]   # 0 = up here
        pkg = sum((1 - b) << k for k, b in enumerate(bits))
        perm[pkg] = idx
    return perm


def operators(n, bonds, jx, jy, jz, gamma=1.0, h=0.0, theta=0.0):
    """Hamiltonian and jump operators in the package basis."""
    d = 2 ** n
    H = np.zeros((d, d), dtype=complex)
    for a, b in bonds:
        for J, S in ((jx, SX), (jy, SY), (jz, SZ)):
            H += J * _kron_site(S, a, n) @ _kron_site(S, b, n)
    for j in range(n):
        H += h * (np.cos(theta) * _kron_site(SX, j, n) + np.sin(theta) * _kron_site(SY, j, n))
    jumps = [np.sqrt(gamma) * _kron_site(SM, j, n) for j in range(n)]
    perm = _to_package_basis(n)
    H = H[np.ix_(perm, perm)]
    jumps = [L[np.ix_(perm, perm)] for L in jumps]
    return H, jumps


def site_op(n, site, which):
    table = {"x": SX, "y": SY, "z": SZ}
    perm = _to_package_basis(n)
    op = _kron_site(table[which], site, n)
    return op[np.ix_(perm, perm)]


def steady_state(H, jumps):
    d = H.shape[0]
    eye = np.eye(d)
    # vec(A X B) = (B^T kron A) vec(X), column stacking
    L = -1j * (np.kron(eye, H) - np.kron(H.T, eye))
    for J in jumps:
        JdJ = J.conj().T @ J
        L += np.kron(J.conj(), J) - 0.5 * np.kron(eye, JdJ) - 0.5 * np.kron(JdJ.T, eye)
    _, s, vh = np.linalg.svd(L)
    vec = vh[-1].conj()
    rho = vec.reshape(d, d, order="F")
    rho = rho / np.trace(rho)
    return 0.5 * (rho + rho.conj().T), s[-2:]


def torus_bonds(lx, ly, periodic_x=True, periodic_y=True):
    """Nearest-neighbour bonds listed from every site (+x and +y)."""
    bonds = []
    for y in range(ly):
        for x in range(lx):
            i = x + lx * y
            if x + 1 < lx or periodic_x:
                bonds.append((i, ((x + 1) % lx) + lx * y))
            if y + 1 < ly or periodic_y:
                bonds.append((i, x + lx * ((y + 1) % ly)))
    return [(a, b) for a, b in bonds if a != b]


def magnetization(rho, n):
    return np.array([np.trace(rho @ sum(site_op(n, j, w) for j in range(n))).real / n
                     for w in "xyz"])


def bloch_steady_state(h, gamma=1.0):
    """Single spin, field h along x, decay gamma: (<sx>, <sy>, <sz>)."""
    den = gamma ** 2 + 8 * h ** 2
    return np.array([0.0, 4 * h * gamma / den, -gamma ** 2 / den])


def qfi_closed_form(a, b, c):
    """Maximum over tau of a cos^2 + b sin^2 + 2 c sin cos."""
    return 0.5 * (a + b) + np.hypot(0.5 * (a - b), c)

import numpy as np
from scipy.ndimage import gaussian_filter

# PASS/FAIL lines of the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def textured(rng, n, mean=500.0, amp=400.0, sigma=1.0):
    """Smooth random volume in HU-like units."""
    return mean + amp * gaussian_filter(rng.standard_normal((n, n, n)), sigma, mode="wrap")


def brute_msssim(x, y, max_scales=3, size=7, sigma=1.5, data_range=1200.0, offset=100.0):
    """Independent nested-loop 3D MS-SSIM: valid windows, 2x mean pooling, renormalized weights."""
    # as many dyadic scales as still hold one full window
    scales = sum(1 for s in range(max_scales) if min(x.shape) // 2**s >= size)
    ax = np.arange(size) - (size - 1) / 2.0
    g1 = np.exp(-(ax**2) / (2 * sigma**2))
    g1 /= g1.sum()
    kernel = g1[:, None, None] * g1[None, :, None] * g1[None, None, :]
    weights = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333][:scales])
    weights /= weights.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    x = x + offset
    y = y + offset
    score = 1.0
    for s in range(scales):
        nx, ny, nz = x.shape
        lum_cs, cs_only = [], []
        for i in range(nx - size + 1):
            for j in range(ny - size + 1):
                for k in range(nz - size + 1):
                    px = x[i : i + size, j : j + size, k : k + size]
                    py = y[i : i + size, j : j + size, k : k + size]
                    mx, my = (kernel * px).sum(), (kernel * py).sum()
                    vx = (kernel * px * px).sum() - mx * mx
                    vy = (kernel * py * py).sum() - my * my
                    cxy = (kernel * px * py).sum() - mx * my
                    cs = (2 * cxy + c2) / (vx + vy + c2)
                    lum_cs.append((2 * mx * my + c1) / (mx * mx + my * my + c1) * cs)
                    cs_only.append(cs)
        if s == scales - 1:
            score *= max(np.mean(lum_cs), 0.0) ** weights[s]
        else:
            score *= max(np.mean(cs_only), 0.0) ** weights[s]
            m = [d - d % 2 for d in x.shape]
            x = np.array([[[x[2 * a : 2 * a + 2, 2 * b : 2 * b + 2, 2 * c : 2 * c + 2].mean()
                            for c in range(m[2] // 2)] for b in range(m[1] // 2)] for a in range(m[0] // 2)])
            y = np.array([[[y[2 * a : 2 * a + 2, 2 * b : 2 * b + 2, 2 * c : 2 * c + 2].mean()
                            for c in range(m[2] // 2)] for b in range(m[1] // 2)] for a in range(m[0] // 2)])
    return 100.0 * score

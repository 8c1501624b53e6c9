"""Hot inner loops, each in a numba and a pure-numpy flavour.

Both flavours visit contributions in the same order (corner-major, then item
order), so accumulations agree bit for bit. The public names at the bottom of
the module resolve to whichever backend ``evresid._accel`` selected.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# voxel scatter: trilinear deposit of events into a (B, H, W) grid


def _voxel_scatter_np(x, y, tstar, p, bins, height, width):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tstar = np.asarray(tstar, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros(bins * height * width)
    if x.size == 0:
        return out.reshape(bins, height, width)
    x0 = np.floor(x)
    y0 = np.floor(y)
    b0 = np.floor(tstar)
    fx, fy, fb = x - x0, y - y0, tstar - b0
    x0, y0, b0 = x0.astype(np.int64), y0.astype(np.int64), b0.astype(np.int64)
    idx_parts, val_parts = [], []
    for db in (0, 1):
        wb = fb if db else 1.0 - fb
        bb = b0 + db
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            yy = y0 + dy
            for dx in (0, 1):
                wx = fx if dx else 1.0 - fx
                xx = x0 + dx
                ok = (bb >= 0) & (bb < bins) & (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
                idx_parts.append(((bb * height + yy) * width + xx)[ok])
                val_parts.append((p * (wx * wy * wb))[ok])
    idx = np.concatenate(idx_parts)
    val = np.concatenate(val_parts)
    out += np.bincount(idx, weights=val, minlength=out.size)
    return out.reshape(bins, height, width)


@njit(cache=True)
def _voxel_scatter_nb(x, y, tstar, p, bins, height, width):
    out = np.zeros(bins * height * width)
    n = x.shape[0]
    for corner in range(8):
        db = corner // 4
        dy = (corner // 2) % 2
        dx = corner % 2
        for i in range(n):
            x0 = np.floor(x[i])
            y0 = np.floor(y[i])
            b0 = np.floor(tstar[i])
            fx = x[i] - x0
            fy = y[i] - y0
            fb = tstar[i] - b0
            xx = int(x0) + dx
            yy = int(y0) + dy
            bb = int(b0) + db
            if bb < 0 or bb >= bins or yy < 0 or yy >= height or xx < 0 or xx >= width:
                continue
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            wb = fb if db else 1.0 - fb
            out[(bb * height + yy) * width + xx] += p[i] * (wx * wy * wb)
    return out.reshape(bins, height, width)


# ---------------------------------------------------------------------------
# bilinear splat of K-channel values at real positions into (K, H, W)


def _splat_np(x, y, values, height, width):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    k = values.shape[1]
    out = np.zeros((k, height * width))
    if x.size == 0:
        return out.reshape(k, height, width)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    idx_parts, src_parts, w_parts = [], [], []
    for dy in (0, 1):
        wy = fy if dy else 1.0 - fy
        yy = y0 + dy
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            xx = x0 + dx
            ok = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
            idx_parts.append((yy * width + xx)[ok])
            src_parts.append(np.nonzero(ok)[0])
            w_parts.append((wx * wy)[ok])
    idx = np.concatenate(idx_parts)
    src = np.concatenate(src_parts)
    w = np.concatenate(w_parts)
    for c in range(k):
        out[c] += np.bincount(idx, weights=values[src, c] * w, minlength=height * width)
    return out.reshape(k, height, width)


@njit(cache=True)
def _splat_nb(x, y, values, height, width):
    k = values.shape[1]
    out = np.zeros((k, height * width))
    n = x.shape[0]
    for c in range(k):
        for corner in range(4):
            dy = corner // 2
            dx = corner % 2
            for i in range(n):
                x0 = np.floor(x[i])
                y0 = np.floor(y[i])
                xx = int(x0) + dx
                yy = int(y0) + dy
                if yy < 0 or yy >= height or xx < 0 or xx >= width:
                    continue
                fx = x[i] - x0
                fy = y[i] - y0
                wx = fx if dx else 1.0 - fx
                wy = fy if dy else 1.0 - fy
                out[c, yy * width + xx] += values[i, c] * (wx * wy)
    return out.reshape(k, height, width)


# ---------------------------------------------------------------------------
# per-map bilinear gather (border clamp) and its adjoint


def _gather_maps_np(maps, cx, cy):
    m, h, w = maps.shape
    flat = maps.reshape(-1)
    cxc = np.clip(cx, 0.0, w - 1.0)
    cyc = np.clip(cy, 0.0, h - 1.0)
    x0 = np.floor(cxc)
    y0 = np.floor(cyc)
    fx, fy = cxc - x0, cyc - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    base = (np.arange(m) * (h * w))[:, None]
    v00 = flat[base + y0 * w + x0]
    v01 = flat[base + y0 * w + x1]
    v10 = flat[base + y1 * w + x0]
    v11 = flat[base + y1 * w + x1]
    return (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)


def _gather_maps_backward_np(maps, cx, cy, gout, need_maps, need_coords):
    m, h, w = maps.shape
    flat = maps.reshape(-1)
    inx = (cx >= 0.0) & (cx <= w - 1.0)
    iny = (cy >= 0.0) & (cy <= h - 1.0)
    cxc = np.clip(cx, 0.0, w - 1.0)
    cyc = np.clip(cy, 0.0, h - 1.0)
    x0 = np.floor(cxc)
    y0 = np.floor(cyc)
    fx, fy = cxc - x0, cyc - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    base = (np.arange(m) * (h * w))[:, None]
    i00 = base + y0 * w + x0
    i01 = base + y0 * w + x1
    i10 = base + y1 * w + x0
    i11 = base + y1 * w + x1
    gmaps = gx = gy = None
    if need_maps:
        idx = np.concatenate([i00.ravel(), i01.ravel(), i10.ravel(), i11.ravel()])
        val = np.concatenate([
            (gout * (1.0 - fy) * (1.0 - fx)).ravel(),
            (gout * (1.0 - fy) * fx).ravel(),
            (gout * fy * (1.0 - fx)).ravel(),
            (gout * fy * fx).ravel(),
        ])
        gmaps = np.bincount(idx, weights=val, minlength=flat.size).reshape(m, h, w)
    if need_coords:
        v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
        gx = gout * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10)) * inx
        gy = gout * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01)) * iny
    return gmaps, gx, gy


@njit(cache=True)
def _gather_maps_nb(maps, cx, cy):
    m, h, w = maps.shape
    k = cx.shape[1]
    out = np.empty((m, k))
    for i in range(m):
        for j in range(k):
            x = min(max(cx[i, j], 0.0), w - 1.0)
            y = min(max(cy[i, j], 0.0), h - 1.0)
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            fx = x - x0
            fy = y - y0
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            out[i, j] = (1.0 - fy) * ((1.0 - fx) * maps[i, y0, x0] + fx * maps[i, y0, x1]) + fy * (
                (1.0 - fx) * maps[i, y1, x0] + fx * maps[i, y1, x1]
            )
    return out


@njit(cache=True)
def _gather_maps_backward_core_nb(maps, cx, cy, gout, need_maps, need_coords):
    m, h, w = maps.shape
    k = cx.shape[1]
    gmaps = np.zeros((m, h, w))
    gx = np.zeros((m, k))
    gy = np.zeros((m, k))
    # corner-major accumulation mirrors the numpy bincount order
    if need_maps:
        for corner in range(4):
            dy = corner // 2
            dx = corner % 2
            for i in range(m):
                for j in range(k):
                    x = min(max(cx[i, j], 0.0), w - 1.0)
                    y = min(max(cy[i, j], 0.0), h - 1.0)
                    x0 = int(np.floor(x))
                    y0 = int(np.floor(y))
                    fx = x - x0
                    fy = y - y0
                    xx = min(x0 + dx, w - 1)
                    yy = min(y0 + dy, h - 1)
                    wx = fx if dx else 1.0 - fx
                    wy = fy if dy else 1.0 - fy
                    gmaps[i, yy, xx] += gout[i, j] * (wy * wx)
    if need_coords:
        for i in range(m):
            for j in range(k):
                x = min(max(cx[i, j], 0.0), w - 1.0)
                y = min(max(cy[i, j], 0.0), h - 1.0)
                x0 = int(np.floor(x))
                y0 = int(np.floor(y))
                fx = x - x0
                fy = y - y0
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                v00 = maps[i, y0, x0]
                v01 = maps[i, y0, x1]
                v10 = maps[i, y1, x0]
                v11 = maps[i, y1, x1]
                if 0.0 <= cx[i, j] <= w - 1.0:
                    gx[i, j] = gout[i, j] * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
                if 0.0 <= cy[i, j] <= h - 1.0:
                    gy[i, j] = gout[i, j] * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
    return gmaps, gx, gy


def _gather_maps_backward_nb(maps, cx, cy, gout, need_maps, need_coords):
    gmaps, gx, gy = _gather_maps_backward_core_nb(
        np.ascontiguousarray(maps, dtype=np.float64),
        np.ascontiguousarray(cx, dtype=np.float64),
        np.ascontiguousarray(cy, dtype=np.float64),
        np.ascontiguousarray(gout, dtype=np.float64),
        need_maps,
        need_coords,
    )
    return (gmaps if need_maps else None), (gx if need_coords else None), (gy if need_coords else None)


# ---------------------------------------------------------------------------
# contrast-threshold crossings for one simulation step


def _crossings_np(l_prev, l_new, ref, threshold, t_prev, t_new):
    """Emit events for every ±threshold crossing between two log-intensity frames.

    ``ref`` is updated in place. Returns ``(pixel_index, time, polarity)``
    ordered pixel-major, then by crossing order within the pixel.
    """
    diff = l_new - ref
    count = np.floor(np.abs(diff) / threshold).astype(np.int64)
    pix = np.nonzero(count)[0]
    if pix.size == 0:
        return np.empty(0, np.int64), np.empty(0), np.empty(0, np.int8)
    k = count[pix]
    sign = np.sign(diff[pix])
    rep = np.repeat(pix, k)
    starts = np.cumsum(k) - k
    j = np.arange(rep.size) - np.repeat(starts, k) + 1
    sgn = np.repeat(sign, k)
    level = ref[rep] + sgn * j * threshold
    lp = l_prev[rep]
    span = l_new[rep] - lp
    frac = (level - lp) / span
    times = t_prev + frac * (t_new - t_prev)
    ref[pix] += sign * k * threshold
    return rep.astype(np.int64), times, sgn.astype(np.int8)


@njit(cache=True)
def _crossings_nb(l_prev, l_new, ref, threshold, t_prev, t_new):
    n = l_new.shape[0]
    total = 0
    for i in range(n):
        total += int(np.floor(abs(l_new[i] - ref[i]) / threshold))
    pix = np.empty(total, np.int64)
    times = np.empty(total)
    pol = np.empty(total, np.int8)
    e = 0
    for i in range(n):
        d = l_new[i] - ref[i]
        k = int(np.floor(abs(d) / threshold))
        if k == 0:
            continue
        s = 1.0 if d > 0 else -1.0
        lp = l_prev[i]
        span = l_new[i] - lp
        r0 = ref[i]
        for j in range(1, k + 1):
            level = r0 + s * j * threshold
            frac = (level - lp) / span
            pix[e] = i
            times[e] = t_prev + frac * (t_new - t_prev)
            pol[e] = 1 if s > 0 else -1
            e += 1
        ref[i] = r0 + s * k * threshold
    return pix, times, pol


# ---------------------------------------------------------------------------
# gaussian blob texture, evaluated at (possibly warped) source coordinates


def _render_blobs_np(x0, y0, cx, cy, amp, sigma, cutoff):
    value = np.zeros(x0.shape)
    cover = np.zeros(x0.shape)
    inv = 1.0 / (2.0 * sigma * sigma)
    cut2 = (cutoff * sigma) ** 2
    for k in range(cx.shape[0]):
        r2 = (x0 - cx[k]) ** 2 + (y0 - cy[k]) ** 2
        g = np.where(r2 < cut2, np.exp(-r2 * inv), 0.0)
        value += amp[k] * g
        cover += g
    return value, cover


@njit(cache=True)
def _render_blobs_nb(x0, y0, cx, cy, amp, sigma, cutoff):
    # x0/y0 are (H, W); blobs are culled per 8x8 tile against the tile's bounding box
    h, w = x0.shape
    value = np.zeros((h, w))
    cover = np.zeros((h, w))
    inv = 1.0 / (2.0 * sigma * sigma)
    reach = cutoff * sigma
    cut2 = reach * reach
    nb = cx.shape[0]
    for ty in range(0, h, 8):
        for tx in range(0, w, 8):
            y1 = min(ty + 8, h)
            x1 = min(tx + 8, w)
            xmin = x0[ty, tx]
            xmax = xmin
            ymin = y0[ty, tx]
            ymax = ymin
            for i in range(ty, y1):
                for j in range(tx, x1):
                    xmin = min(xmin, x0[i, j])
                    xmax = max(xmax, x0[i, j])
                    ymin = min(ymin, y0[i, j])
                    ymax = max(ymax, y0[i, j])
            for k in range(nb):
                if cx[k] < xmin - reach or cx[k] > xmax + reach or cy[k] < ymin - reach or cy[k] > ymax + reach:
                    continue
                for i in range(ty, y1):
                    for j in range(tx, x1):
                        dx = x0[i, j] - cx[k]
                        dy = y0[i, j] - cy[k]
                        r2 = dx * dx + dy * dy
                        if r2 < cut2:
                            g = np.exp(-r2 * inv)
                            value[i, j] += amp[k] * g
                            cover[i, j] += g
    return value.ravel(), cover.ravel()

# ---------------------------------------------------------------------------
# public dispatch


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def voxel_scatter(x, y, tstar, p, bins, height, width, use_numba=None):
    """Deposit events into a ``(bins, height, width)`` grid with trilinear weights."""
    if _pick(use_numba):
        return _voxel_scatter_nb(_f64(x), _f64(y), _f64(tstar), _f64(p), int(bins), int(height), int(width))
    return _voxel_scatter_np(x, y, tstar, p, int(bins), int(height), int(width))


def splat(x, y, values, height, width, use_numba=None):
    """Bilinearly splat per-point ``values`` of shape ``(n, k)`` into a ``(k, H, W)`` image."""
    values = _f64(values)
    if values.ndim == 1:
        values = values[:, None]
    if _pick(use_numba):
        return _splat_nb(_f64(x), _f64(y), values, int(height), int(width))
    return _splat_np(x, y, values, int(height), int(width))


def gather_maps(maps, cx, cy, use_numba=None):
    """Sample map ``i`` at its own points ``(cx[i], cy[i])``; coordinates clamp to the border."""
    if _pick(use_numba):
        return _gather_maps_nb(_f64(maps), _f64(cx), _f64(cy))
    return _gather_maps_np(_f64(maps), _f64(cx), _f64(cy))


def gather_maps_backward(maps, cx, cy, gout, need_maps=True, need_coords=True, use_numba=None):
    if _pick(use_numba):
        return _gather_maps_backward_nb(maps, cx, cy, gout, need_maps, need_coords)
    return _gather_maps_backward_np(_f64(maps), _f64(cx), _f64(cy), _f64(gout), need_maps, need_coords)


def crossings(l_prev, l_new, ref, threshold, t_prev, t_new, use_numba=None):
    if _pick(use_numba):
        return _crossings_nb(_f64(l_prev), _f64(l_new), ref, float(threshold), float(t_prev), float(t_new))
    return _crossings_np(l_prev, l_new, ref, float(threshold), float(t_prev), float(t_new))


def render_blobs(x0, y0, cx, cy, amp, sigma, cutoff=4.0, use_numba=None):
    """Sum of isotropic gaussians at flat coordinates; returns ``(value, coverage)``.

    Blobs are truncated at ``cutoff * sigma``. The two backends may differ in
    the last ulp because their ``exp`` implementations differ.
    """
    x0, y0 = _f64(x0), _f64(y0)
    args = (_f64(cx), _f64(cy), _f64(amp), float(sigma), float(cutoff))
    if _pick(use_numba):
        return _render_blobs_nb(x0.reshape(-1, x0.shape[-1]) if x0.ndim > 1 else x0[None],
                                y0.reshape(-1, y0.shape[-1]) if y0.ndim > 1 else y0[None], *args)
    return _render_blobs_np(x0.ravel(), y0.ravel(), *args)


def _pick(use_numba):
    if use_numba is None:
        return USE_NUMBA
    if use_numba and not USE_NUMBA:
        from ._accel import HAVE_NUMBA

        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
    return bool(use_numba)

"""Hot inner loops, each in a numba and a pure-numpy flavour.

The public names (``im2col``, ``col2im``, ``segment_errors``, ``value_noise``)
are bound at import time according to :data:`atdn._accel.USE_NUMBA`. Both
flavours stay importable (``*_nb`` / ``*_np``) for tests and benchmarks.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- im2col

def im2col_np(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh, ow = conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, oh * ow)


def col2im_np(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh, ow = conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


@njit
def _im2col_loop(xp, kh, kw, stride, oh, ow, out):
    n, c = xp.shape[0], xp.shape[1]
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(oh):
                        for x in range(ow):
                            out[b, row, y * ow + x] = xp[b, ch, i + y * stride, j + x * stride]


@njit
def _col2im_loop(cols, kh, kw, stride, oh, ow, out):
    n, c = out.shape[0], out.shape[1]
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(oh):
                        for x in range(ow):
                            out[b, ch, i + y * stride, j + x * stride] += cols[b, row, y * ow + x]


def im2col_nb(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh, ow = conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)
    out = np.empty((n, c * kh * kw, oh * ow), dtype=x.dtype)
    _im2col_loop(xp, kh, kw, stride, oh, ow, out)
    return out


def col2im_nb(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh, ow = conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    _col2im_loop(np.ascontiguousarray(cols), kh, kw, stride, oh, ow, out)
    if pad:
        out = np.ascontiguousarray(out[:, :, pad:pad + h, pad:pad + w])
    return out


# ------------------------------------------------- KITTI segment errors
#
# For start frame f and length L, the end frame is the first j >= f with
# dist[j] - dist[f] >= L. The error pose is inv(rel_est) * rel_gt with
# rel = inv(P_f) * P_j. Angles use atan2(|vee(R - R^T)| / 2, (tr - 1) / 2)
# so that an exactly symmetric R gives exactly zero.

def _first_reaching_np(dist, starts, length):
    n = dist.shape[0]
    base = dist[starts]
    j = np.searchsorted(dist, base + length, side="left")
    j = np.maximum(j, starts)
    while True:
        back = (j > starts) & (dist[np.maximum(j - 1, 0)] - base >= length)
        if not back.any():
            break
        j = np.where(back, j - 1, j)
    while True:
        jc = np.minimum(j, n - 1)
        fwd = (j < n) & (dist[jc] - base < length)
        if not fwd.any():
            break
        j = np.where(fwd, j + 1, j)
    return j


def _relative_np(ra, ta, rb, tb):
    r = np.einsum("...ki,...kj->...ij", ra, rb)
    t = np.einsum("...ki,...k->...i", ra, tb - ta)
    return r, t


def _angle_np(r):
    c = (r[..., 0, 0] + r[..., 1, 1] + r[..., 2, 2] - 1.0) * 0.5
    v0 = r[..., 2, 1] - r[..., 1, 2]
    v1 = r[..., 0, 2] - r[..., 2, 0]
    v2 = r[..., 1, 0] - r[..., 0, 1]
    s = 0.5 * np.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
    return np.arctan2(s, c)


def segment_errors_np(rg, tg, re, te, dist, lengths, step=1):
    starts = np.arange(0, rg.shape[0], step)
    n_l = lengths.shape[0]
    t_err = np.zeros((starts.shape[0], n_l))
    r_err = np.zeros((starts.shape[0], n_l))
    valid = np.zeros((starts.shape[0], n_l), dtype=np.bool_)
    for li in range(n_l):
        length = lengths[li]
        last = _first_reaching_np(dist, starts, length)
        ok = last < rg.shape[0]
        if not ok.any():
            continue
        f, l = starts[ok], last[ok]
        rrg, rtg = _relative_np(rg[f], tg[f], rg[l], tg[l])
        rre, rte = _relative_np(re[f], te[f], re[l], te[l])
        er, et = _relative_np(rre, rte, rrg, rtg)
        t_err[ok, li] = np.sqrt(np.sum(et * et, axis=-1)) / length
        r_err[ok, li] = _angle_np(er) / length
        valid[ok, li] = True
    return t_err, r_err, valid


@njit
def _relative3(ra, ta, rb, tb, r_out, t_out):
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += ra[k, i] * rb[k, j]
            r_out[i, j] = acc
    for i in range(3):
        acc = 0.0
        for k in range(3):
            acc += ra[k, i] * (tb[k] - ta[k])
        t_out[i] = acc


@njit
def _segment_errors_loop(rg, tg, re, te, dist, lengths, step, t_err, r_err, valid):
    n = rg.shape[0]
    n_l = lengths.shape[0]
    rrg = np.empty((3, 3))
    rtg = np.empty(3)
    rre = np.empty((3, 3))
    rte = np.empty(3)
    er = np.empty((3, 3))
    et = np.empty(3)
    for si in range(t_err.shape[0]):
        f = si * step
        for li in range(n_l):
            length = lengths[li]
            # smallest j >= f with dist[j] - dist[f] >= length (monotone predicate)
            lo, hi = f, n
            while lo < hi:
                mid = (lo + hi) // 2
                if dist[mid] - dist[f] >= length:
                    hi = mid
                else:
                    lo = mid + 1
            if lo >= n:
                continue
            _relative3(rg[f], tg[f], rg[lo], tg[lo], rrg, rtg)
            _relative3(re[f], te[f], re[lo], te[lo], rre, rte)
            _relative3(rre, rte, rrg, rtg, er, et)
            t_err[si, li] = np.sqrt(et[0] * et[0] + et[1] * et[1] + et[2] * et[2]) / length
            c = (er[0, 0] + er[1, 1] + er[2, 2] - 1.0) * 0.5
            v0 = er[2, 1] - er[1, 2]
            v1 = er[0, 2] - er[2, 0]
            v2 = er[1, 0] - er[0, 1]
            s = 0.5 * np.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
            r_err[si, li] = np.arctan2(s, c) / length
            valid[si, li] = True


def segment_errors_nb(rg, tg, re, te, dist, lengths, step=1):
    n_s = (rg.shape[0] + step - 1) // step
    t_err = np.zeros((n_s, lengths.shape[0]))
    r_err = np.zeros((n_s, lengths.shape[0]))
    valid = np.zeros((n_s, lengths.shape[0]), dtype=np.bool_)
    _segment_errors_loop(
        np.ascontiguousarray(rg, dtype=np.float64), np.ascontiguousarray(tg, dtype=np.float64),
        np.ascontiguousarray(re, dtype=np.float64), np.ascontiguousarray(te, dtype=np.float64),
        np.ascontiguousarray(dist, dtype=np.float64), np.asarray(lengths, dtype=np.float64),
        int(step), t_err, r_err, valid)
    return t_err, r_err, valid


# --------------------------------------------------------- value noise
#
# Lattice values come from a splitmix64 hash of (cell x, cell y, octave,
# seed), so the texture is defined over the whole plane without storage.

_OFFSET = 1 << 31
_K1 = 0x9E3779B97F4A7C15
_K2 = 0xC2B2AE3D27D4EB4F
_K3 = 0x165667B19E3779F9
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _hash_np(ix, iy, octave, seed):
    with np.errstate(over="ignore"):
        z = (ix + _OFFSET).astype(np.uint64) * np.uint64(_K1)
        z ^= (iy + _OFFSET).astype(np.uint64) * np.uint64(_K2)
        z ^= np.uint64(octave + 1) * np.uint64(_K3)
        z ^= np.uint64(seed)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def value_noise_np(xs, ys, seed, octaves):
    out = np.zeros(xs.shape, dtype=np.float64)
    total = 0.0
    for o in range(octaves):
        freq = float(1 << o)
        amp = 0.5 ** o
        x, y = xs * freq, ys * freq
        fx, fy = np.floor(x), np.floor(y)
        ix, iy = fx.astype(np.int64), fy.astype(np.int64)
        tx, ty = x - fx, y - fy
        sx, sy = tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty)
        v00 = _hash_np(ix, iy, o, seed)
        v10 = _hash_np(ix + 1, iy, o, seed)
        v01 = _hash_np(ix, iy + 1, o, seed)
        v11 = _hash_np(ix + 1, iy + 1, o, seed)
        a = v00 + sx * (v10 - v00)
        b = v01 + sx * (v11 - v01)
        out += amp * (a + sy * (b - a))
        total += amp
    return out / total


@njit
def _hash_nb(ix, iy, octave, seed):
    z = np.uint64(ix + _OFFSET) * np.uint64(_K1)
    z ^= np.uint64(iy + _OFFSET) * np.uint64(_K2)
    z ^= np.uint64(octave + 1) * np.uint64(_K3)
    z ^= seed
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    z = z ^ (z >> np.uint64(31))
    return np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit
def _value_noise_loop(xs, ys, seed, octaves, out):
    total = 0.0
    for o in range(octaves):
        total += 0.5 ** o
    for p in range(xs.shape[0]):
        acc = 0.0
        for o in range(octaves):
            freq = float(1 << o)
            amp = 0.5 ** o
            x, y = xs[p] * freq, ys[p] * freq
            fx, fy = np.floor(x), np.floor(y)
            ix, iy = np.int64(fx), np.int64(fy)
            tx, ty = x - fx, y - fy
            sx, sy = tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty)
            v00 = _hash_nb(ix, iy, o, seed)
            v10 = _hash_nb(ix + 1, iy, o, seed)
            v01 = _hash_nb(ix, iy + 1, o, seed)
            v11 = _hash_nb(ix + 1, iy + 1, o, seed)
            a = v00 + sx * (v10 - v00)
            b = v01 + sx * (v11 - v01)
            acc += amp * (a + sy * (b - a))
        out[p] = acc / total


def value_noise_nb(xs, ys, seed, octaves):
    shape = np.shape(xs)
    xs = np.ascontiguousarray(xs, dtype=np.float64).ravel()
    ys = np.ascontiguousarray(ys, dtype=np.float64).ravel()
    out = np.empty(xs.shape[0])
    _value_noise_loop(xs, ys, np.uint64(seed), int(octaves), out)
    return out.reshape(shape)


if USE_NUMBA:
    im2col, col2im = im2col_nb, col2im_nb
    segment_errors, value_noise = segment_errors_nb, value_noise_nb
else:
    im2col, col2im = im2col_np, col2im_np
    segment_errors, value_noise = segment_errors_np, value_noise_np
